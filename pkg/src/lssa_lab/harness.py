"""
Experiment orchestration: gen-data -> train -> attack -> eval -> ablate -> report.

Each command registers its artifact steps on one graph; running a command only
recomputes steps whose outputs are missing or older than their inputs.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from lssa_lab.artifacts import ArtifactGraph, RunLayout, load_outcomes, save_outcomes, write_if_changed
from lssa_lab.attacks import craft_adversarial
from lssa_lab.config import ExperimentConfig
from lssa_lab.data import ShapeCaptionDataset, generate_dataset, load_dataset, save_dataset
from lssa_lab.errors import ConfigError
from lssa_lab.evaluation import (
    RetrievalIndex,
    TransferReport,
    baseline_metrics,
    build_index,
    evaluate_transfer,
    recall_at_k,
    reports_frame,
)
from lssa_lab.models import EncoderPair, load_checkpoint, save_checkpoint, train_contrastive, verify_regression
from lssa_lab.report import ablation_summary, build_report, markdown_table, plot_ablation, write_table, transfer_table

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train", "attack", "eval", "ablate", "report")


def write_report(report: TransferReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report(path: Path) -> TransferReport:
    return TransferReport.model_validate_json(path.read_text(encoding="utf-8"))


class Lab:
    """one output directory, its config snapshot, artifact graph and in-process caches"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.layout = RunLayout(config.out)
        self.workers = config.resolved_workers()
        self._dataset: Optional[ShapeCaptionDataset] = None
        self._models: Dict[str, EncoderPair] = {}
        self._clean: Dict[str, RetrievalIndex] = {}
        self.graph = ArtifactGraph()
        self._register()

    # --- caches ---
    def dataset(self) -> ShapeCaptionDataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.layout.data_dir)
        return self._dataset

    def model(self, tag: str) -> EncoderPair:
        if tag not in self._models:
            self._models[tag] = load_checkpoint(self.layout.model(tag), self.dataset().vocabulary)
        return self._models[tag]

    def clean_index(self, tag: str) -> RetrievalIndex:
        if tag not in self._clean:
            self._clean[tag] = build_index(self.model(tag), self.dataset(), "test")
        return self._clean[tag]

    # --- graph ---
    def _register(self) -> None:
        cfg, lay, g = self.config, self.layout, self.graph
        tags = [m.tag for m in cfg.models]
        ckpts = [lay.model(t) for t in tags]
        attack_cfg = lay.section("attack")

        g.add("gen-data", "gen-data", [lay.section("dataset")], [lay.manifest], self._gen_data)
        for tag in tags:
            g.add(
                f"train:{tag}",
                "train",
                [lay.section(f"model-{tag}"), lay.manifest],
                [lay.model(tag)],
                lambda tag=tag: self._train(tag),
            )

        g.add("eval:baseline", "eval", [lay.manifest, *ckpts], [lay.baseline_csv], self._baseline)
        report_paths: List[Path] = []
        attack_paths: List[Path] = []
        for seed in cfg.seeds:
            for src in cfg.source_tags:
                for pipe in cfg.pipelines:
                    npz, js = lay.attack(seed, src, pipe)
                    attack_paths += [npz, js]
                    g.add(
                        f"attack:seed{seed}:{src}:{pipe}",
                        "attack",
                        [attack_cfg, lay.manifest, lay.model(src)],
                        [npz, js],
                        lambda seed=seed, src=src, pipe=pipe: self._attack(seed, src, pipe),
                    )
                    outs = [lay.report(seed, src, pipe, t) for t in tags]
                    report_paths += outs
                    g.add(
                        f"eval:seed{seed}:{src}:{pipe}",
                        "eval",
                        [attack_cfg, lay.manifest, *ckpts, npz, js],
                        outs,
                        lambda seed=seed, src=src, pipe=pipe: self._evaluate(seed, src, pipe),
                    )
        g.add("eval:matrix", "eval", report_paths, [lay.matrix_csv, lay.matrix_md], lambda: self._matrix(report_paths))

        spec = cfg.ablation
        if spec is not None:
            src = cfg.source_tags[0]
            sweep_cfg = lay.section("ablation")
            sweep_paths: List[Path] = []
            for value in spec.values:
                for seed in cfg.seeds:
                    outs = [lay.ablation_report(spec.param, value, seed, t) for t in tags]
                    sweep_paths += outs
                    g.add(
                        f"ablate:{spec.param}={value}:seed{seed}",
                        "ablate",
                        [sweep_cfg, lay.manifest, *ckpts],
                        outs,
                        lambda value=value, seed=seed: self._ablate(value, seed, src),
                    )
            plots = [lay.ablation_plot(spec.param, t) for t in tags]
            g.add(
                f"ablate:{spec.param}:summary",
                "ablate",
                [sweep_cfg, *sweep_paths],
                [lay.ablation_csv(spec.param), *plots],
                lambda: self._ablation_summary(sweep_paths),
            )

        g.add(
            "report",
            "report",
            [lay.section("report"), lay.manifest, lay.baseline_csv, lay.matrix_csv, *attack_paths],
            [lay.report_index],
            lambda: build_report(self.config, self.layout, self.dataset()),
        )

    def write_config(self) -> None:
        """full snapshot for humans plus the per-step slices the graph reads"""
        if write_if_changed(self.layout.config, self.config.snapshot()):
            logger.info(f"[config] snapshot -> {self.layout.config}")
        for name, text in self.config.sections().items():
            write_if_changed(self.layout.section(name), text)

    def run(self, command: str, force: bool = False) -> List[str]:
        if command not in COMMANDS and command != "all":
            raise ConfigError(f"unknown command '{command}' (known: {', '.join(COMMANDS)}, all)")
        if command == "ablate" and self.config.ablation is None:
            raise ConfigError("no ablation configured: set `ablation` in the config or pass --param and --values")
        self.write_config()
        if command == "all":
            return self.graph.run(None, upstream=True, force=force)
        return self.graph.run(self.graph.select(command), force=force)

    # --- step actions ---
    def _gen_data(self) -> None:
        ds = generate_dataset(self.config.dataset)
        save_dataset(ds, self.layout.data_dir)
        self._dataset = None

    def _train(self, tag: str) -> None:
        ds = self.dataset()
        pair = train_contrastive(ds, self.config.model(tag), show_progress=self.config.show_progress)
        save_checkpoint(pair, self.layout.model(tag))
        self._models.pop(tag, None)
        self._clean.pop(tag, None)
        r1 = recall_at_k(build_index(pair, ds, "test"), 1, "TR")
        logger.info(f"[train] {tag} test TR R@1={r1:.1f} -> {self.layout.model(tag)}")

    def _attack(self, seed: int, src: str, pipe: str) -> None:
        ds, pair = self.dataset(), self.model(src)
        verify_regression(pair, ds)
        outcomes = craft_adversarial(
            pipe, pair, ds, self.config.budget, seed=seed, workers=self.workers, show_progress=self.config.show_progress
        )
        npz, js = self.layout.attack(seed, src, pipe)
        meta = {"pipeline": pipe, "source": src, "seed": seed, "budget": self.config.budget.model_dump(mode="json")}
        save_outcomes(outcomes, npz, js, meta)

    def _evaluate(self, seed: int, src: str, pipe: str) -> None:
        ds = self.dataset()
        npz, js = self.layout.attack(seed, src, pipe)
        crafted = load_outcomes(npz, js, ds.vocabulary)
        for m in self.config.models:
            report = evaluate_transfer(
                self.model(m.tag), ds, crafted, src, pipe, seed, self.config.budget, clean_index=self.clean_index(m.tag)
            )
            write_report(report, self.layout.report(seed, src, pipe, m.tag))

    def _baseline(self) -> None:
        rows = [baseline_metrics(self.model(m.tag), self.dataset()) for m in self.config.models]
        write_table(pd.DataFrame(rows), self.layout.baseline_csv)

    def _matrix(self, paths: List[Path]) -> None:
        frame = reports_frame([read_report(p) for p in paths])
        write_table(frame, self.layout.matrix_csv)
        self.layout.matrix_md.write_text(markdown_table(transfer_table(frame)), encoding="utf-8")
        logger.info(f"[eval] transfer matrix ({len(paths)} reports) -> {self.layout.matrix_csv}")

    def _ablate(self, value: Any, seed: int, src: str) -> None:
        spec, ds = self.config.ablation, self.dataset()
        budget = spec.budget_for(value, self.config.budget)
        crafted = craft_adversarial(
            spec.pipeline, self.model(src), ds, budget, seed=seed, workers=self.workers, show_progress=self.config.show_progress
        )
        for m in self.config.models:
            report = evaluate_transfer(
                self.model(m.tag), ds, crafted, src, spec.pipeline, seed, budget, clean_index=self.clean_index(m.tag)
            )
            write_report(report, self.layout.ablation_report(spec.param, value, seed, m.tag))
        logger.info(f"[ablate] {spec.param}={value} seed={seed} done")

    def _ablation_summary(self, paths: List[Path]) -> None:
        spec = self.config.ablation
        rows = []
        for value in spec.values:
            for seed in self.config.seeds:
                for m in self.config.models:
                    report = read_report(self.layout.ablation_report(spec.param, value, seed, m.tag))
                    rows.append({"value": value, **report.row()})
        summary = ablation_summary(pd.DataFrame(rows), spec.param, spec.values)
        write_table(summary, self.layout.ablation_csv(spec.param))
        for m in self.config.models:
            plot_ablation(summary, spec.param, m.tag, self.layout.ablation_plot(spec.param, m.tag))


# ---------------------------
# Commands
# ---------------------------
def cmd_gen_data(config: ExperimentConfig, force: bool = False) -> List[str]:
    return Lab(config).run("gen-data", force=force)


def cmd_train(config: ExperimentConfig, force: bool = False) -> List[str]:
    return Lab(config).run("train", force=force)


def cmd_attack(config: ExperimentConfig, force: bool = False) -> List[str]:
    return Lab(config).run("attack", force=force)


def cmd_eval(config: ExperimentConfig, force: bool = False) -> List[str]:
    return Lab(config).run("eval", force=force)


def cmd_ablate(config: ExperimentConfig, force: bool = False) -> List[str]:
    return Lab(config).run("ablate", force=force)


def cmd_report(config: ExperimentConfig, force: bool = False) -> List[str]:
    return Lab(config).run("report", force=force)


def cmd_all(config: ExperimentConfig, force: bool = False) -> List[str]:
    return Lab(config).run("all", force=force)
