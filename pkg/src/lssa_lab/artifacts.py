"""
Artifact graph, run-directory layout and the on-disk form of attack outcomes.

Every step declares the files it reads and writes. Steps run in dependency
order; a step is recomputed when an output is missing or an input is newer
than its oldest output.
"""

import graphlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch

from lssa_lab.attacks import AttackOutcome
from lssa_lab.data import Vocabulary
from lssa_lab.errors import ArtifactCycleError, ConfigError, MissingArtifactError, SchemaVersionError

logger = logging.getLogger(__name__)


@dataclass
class Step:
    name: str
    command: str
    inputs: List[Path]
    outputs: List[Path]
    action: Callable[[], None] = field(repr=False)

    def missing_outputs(self) -> List[Path]:
        return [p for p in self.outputs if not p.exists()]

    def is_stale(self) -> bool:
        if not self.outputs or self.missing_outputs():
            return True
        oldest = min(p.stat().st_mtime_ns for p in self.outputs)
        return any(p.exists() and p.stat().st_mtime_ns > oldest for p in self.inputs)


class ArtifactGraph:
    def __init__(self):
        self.steps: Dict[str, Step] = {}
        self._producer: Dict[Path, str] = {}

    def add(self, name: str, command: str, inputs: Iterable, outputs: Iterable, action: Callable[[], None]) -> Step:
        if name in self.steps:
            raise ConfigError(f"duplicate artifact step '{name}'")
        step = Step(name, command, [Path(p) for p in inputs], [Path(p) for p in outputs], action)
        for out in step.outputs:
            if out in self._producer:
                raise ConfigError(f"{out} is produced by both '{self._producer[out]}' and '{name}'")
            self._producer[out] = name
        self.steps[name] = step
        return step

    def dependencies(self, name: str) -> Set[str]:
        return {self._producer[p] for p in self.steps[name].inputs if p in self._producer}

    def order(self) -> List[str]:
        sorter = graphlib.TopologicalSorter({name: self.dependencies(name) for name in sorted(self.steps)})
        try:
            return list(sorter.static_order())
        except graphlib.CycleError as e:
            raise ArtifactCycleError(f"artifact steps form a cycle: {' -> '.join(e.args[1])}") from e

    def ancestors(self, names: Iterable[str]) -> Set[str]:
        seen: Set[str] = set()
        todo = list(names)
        while todo:
            name = todo.pop()
            for dep in self.dependencies(name):
                if dep not in seen:
                    seen.add(dep)
                    todo.append(dep)
        return seen

    def select(self, command: str) -> List[str]:
        return [name for name, step in self.steps.items() if step.command == command]

    def run(self, targets: Optional[Sequence[str]] = None, upstream: bool = False, force: bool = False) -> List[str]:
        """
        Execute `targets` (all steps when None). Upstream steps with missing outputs are
        built only when `upstream` is set, otherwise they raise MissingArtifactError.
        Returns the names of the steps that actually ran.
        """
        order = self.order()
        targets = set(order if targets is None else targets)
        unknown = targets - set(self.steps)
        if unknown:
            raise ConfigError(f"unknown artifact steps: {sorted(unknown)}")
        needed = targets | self.ancestors(targets)

        ran: List[str] = []
        for name in order:
            if name not in needed:
                continue
            step = self.steps[name]
            if name not in targets and not upstream and step.missing_outputs():
                missing = step.missing_outputs()[0]
                raise MissingArtifactError(missing, f"missing artifact: {missing} (run `lssa-lab {step.command}` first)")
            absent = [p for p in step.inputs if not p.exists()]
            if absent:
                raise MissingArtifactError(absent[0])
            if (force and name in targets) or step.is_stale():
                logger.info(f"[run] {name}")
                step.action()
                ran.append(name)
            else:
                logger.info(f"[skip] up to date: {name}")
        return ran


# ---------------------------
# Run layout
# ---------------------------
class RunLayout:
    """where every artifact of one output directory lives"""

    def __init__(self, root):
        self.root = Path(root)
        self.config = self.root / "config.json"
        self.config_dir = self.root / "config"
        self.data_dir = self.root / "data"
        self.manifest = self.data_dir / "manifest.json"
        self.eval_dir = self.root / "eval"
        self.baseline_csv = self.eval_dir / "baseline.csv"
        self.matrix_csv = self.eval_dir / "transfer_matrix.csv"
        self.matrix_md = self.eval_dir / "transfer_matrix.md"
        self.ablation_dir = self.root / "ablations"
        self.report_dir = self.root / "report"
        self.report_index = self.report_dir / "index.md"

    def section(self, name: str) -> Path:
        return self.config_dir / f"{name}.json"

    def model(self, tag: str) -> Path:
        return self.root / "models" / f"{tag}.ckpt"

    def attack(self, seed: int, source: str, pipeline: str) -> Tuple[Path, Path]:
        base = self.root / "attacks" / f"seed{seed}" / source
        return base / f"{pipeline}.npz", base / f"{pipeline}.json"

    def report(self, seed: int, source: str, pipeline: str, target: str) -> Path:
        return self.eval_dir / "reports" / f"seed{seed}" / source / pipeline / f"{target}.json"

    def ablation_report(self, param: str, value, seed: int, target: str) -> Path:
        return self.ablation_dir / param / f"{param}={value}" / f"seed{seed}" / f"{target}.json"

    def ablation_csv(self, param: str) -> Path:
        return self.ablation_dir / param / f"{param}_summary.csv"

    def ablation_plot(self, param: str, target: str) -> Path:
        return self.ablation_dir / param / f"{param}_{target}.png"


def write_if_changed(path: Path, text: str) -> bool:
    """keeps the mtime of an unchanged file so downstream steps stay fresh"""
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists() and path.read_text(encoding="utf-8") == text:
        return False
    path.write_text(text, encoding="utf-8")
    return True


# ---------------------------
# Attack outcomes on disk
# ---------------------------
ATTACK_VERSION = 1


def save_outcomes(outcomes: Dict[int, AttackOutcome], npz_path: Path, json_path: Path, meta: Dict[str, Any]) -> None:
    npz_path.parent.mkdir(parents=True, exist_ok=True)
    pids = sorted(outcomes)
    images = np.stack([outcomes[p].v_adv.detach().cpu().numpy().astype(np.float64) for p in pids]) if pids else np.zeros((0,))
    np.savez_compressed(npz_path, pair_ids=np.asarray(pids, dtype=np.int64), v_adv=images)
    record = {
        "schema_version": ATTACK_VERSION,
        **meta,
        "pairs": [
            {
                "pair_id": p,
                "captions": [t.text for t in outcomes[p].t_adv],
                "trace": outcomes[p].trace,
                "seeds": outcomes[p].seeds,
            }
            for p in pids
        ],
    }
    json_path.write_text(json.dumps(record, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_outcomes(npz_path: Path, json_path: Path, vocabulary: Vocabulary) -> Dict[int, AttackOutcome]:
    for p in (npz_path, json_path):
        if not p.exists():
            raise MissingArtifactError(p)
    record = json.loads(json_path.read_text(encoding="utf-8"))
    if record.get("schema_version") != ATTACK_VERSION:
        raise SchemaVersionError(f"attack record {json_path.name}", record.get("schema_version"), ATTACK_VERSION)
    with np.load(npz_path) as arrays:
        pids = [int(p) for p in arrays["pair_ids"]]
        images = arrays["v_adv"]
    meta = {p["pair_id"]: p for p in record["pairs"]}
    if sorted(meta) != pids:
        raise SchemaVersionError(f"attack record {json_path.name}", "pair ids differ from the image archive", ATTACK_VERSION)

    out = {}
    for row, pid in enumerate(pids):
        entry = meta[pid]
        out[pid] = AttackOutcome(
            pipeline=record.get("pipeline", ""),
            pair_id=pid,
            v_adv=torch.from_numpy(images[row].copy()),
            t_adv=tuple(vocabulary.tokenize(text) for text in entry["captions"]),
            trace=list(entry.get("trace", [])),
            seeds=dict(entry.get("seeds", {})),
        )
    return out
