"""
Human-readable bundle for one run directory: transfer tables, perturbation
triptychs, caption diffs, the ablation ladder, shuffle panels and plots.
Every plot is written next to the CSV it was drawn from.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch

from lssa_lab.artifacts import RunLayout, load_outcomes
from lssa_lab.config import ExperimentConfig, ShuffleConfig
from lssa_lab.data import ShapeCaptionDataset, TokenSequence, grid_to_uint8
from lssa_lab.errors import MissingArtifactError
from lssa_lab.seeds import derive_seed, torch_generator
from lssa_lab.transforms import draw_shuffle_plan, global_shuffle, local_shuffle

matplotlib.use("Agg")

logger = logging.getLogger(__name__)

LADDER = (
    ("sga_it", "image-text"),
    ("sga_it_sampled", "+ sampling"),
    ("sga_it_shuffled", "+ local shuffle"),
    ("sga_it_sampled_shuffled", "+ sampling + local shuffle"),
    ("lssa", "+ sampling + local shuffle + momentum"),
)
ASR_PAIR = ("tr_asr1", "ir_asr1")
R1_PAIR = ("adv_tr_r1", "adv_ir_r1")


# ---------------------------
# Tables
# ---------------------------
def markdown_table(frame: pd.DataFrame) -> str:
    cols = [str(c) for c in frame.columns]
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for row in frame.itertuples(index=False):
        lines.append("| " + " | ".join("" if v is None else str(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def _cell(tr, ir, white_box: bool) -> str:
    def fmt(x):
        return "n/a" if x is None or pd.isna(x) else f"{x:.1f}"

    return f"{fmt(tr)} / {fmt(ir)}" + ("*" if white_box else "")


def transfer_table(frame: pd.DataFrame, metrics=ASR_PAIR) -> pd.DataFrame:
    """
    One row per (source, attack), one column per target holding "TR / IR"
    medians over seeds; white-box cells are starred.
    """
    if frame.empty:
        return pd.DataFrame(columns=["source", "attack"])
    tr, ir = metrics
    med = (
        frame.groupby(["source", "attack", "target", "white_box"], sort=True)[[tr, ir]]
        .median(numeric_only=True)
        .reset_index()
    )
    targets = sorted(med["target"].unique())
    rows = []
    for (source, attack), grp in med.groupby(["source", "attack"], sort=True):
        row: Dict[str, Any] = {"source": source, "attack": attack}
        for _, r in grp.iterrows():
            row[r["target"]] = _cell(r[tr], r[ir], bool(r["white_box"]))
        rows.append(row)
    return pd.DataFrame(rows, columns=["source", "attack"] + targets)


def ladder_table(frame: pd.DataFrame, metrics=ASR_PAIR) -> pd.DataFrame:
    if frame.empty:
        return pd.DataFrame(columns=["step", "attack"])
    table = transfer_table(frame[frame["attack"].isin([name for name, _ in LADDER])], metrics)
    label = dict(LADDER)
    table.insert(0, "step", table["attack"].map(label))
    order = {name: i for i, (name, _) in enumerate(LADDER)}
    return table.sort_values(["source", "attack"], key=lambda s: s.map(order) if s.name == "attack" else s).reset_index(drop=True)


def write_table(frame: pd.DataFrame, csv_path: Path, md_path: Optional[Path] = None) -> None:
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(csv_path, index=False, float_format="%.6f")
    if md_path is not None:
        md_path.write_text(markdown_table(frame), encoding="utf-8")


# ---------------------------
# Images
# ---------------------------
def perturbation_panel(v, v_adv, amplification: float) -> np.ndarray:
    """clamp(0.5 + amplification * (v_adv - v)), mid-gray means no change"""
    diff = np.asarray(v_adv, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return np.clip(0.5 + amplification * diff, 0.0, 1.0)


def _hwc(grid) -> np.ndarray:
    return np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0).transpose(1, 2, 0)


def save_triptych(v, v_adv, amplification: float, png_path: Path) -> np.ndarray:
    """original | adversarial | amplified perturbation; the panel array lands next to the png"""
    panel = perturbation_panel(v, v_adv, amplification)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    for ax, img, title in zip(axes, (v, v_adv, panel), ("original", "adversarial", f"perturbation x{amplification:g}")):
        ax.imshow(_hwc(img), interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    np.savez_compressed(png_path.with_suffix(".npz"), original=np.asarray(v, dtype=np.float64), adversarial=np.asarray(v_adv, dtype=np.float64), panel=panel)
    return panel


def save_shuffle_panels(v, png_path: Path, seed: int = 0, grid=(2, 2)) -> None:
    """original | global shuffle | local shuffle of one image"""
    rng = torch_generator(derive_seed(seed, "report", "shuffle"))
    cfg = ShuffleConfig(N=1, grid=tuple(grid))
    (_, gperm), = draw_shuffle_plan(cfg, rng, kind="global")
    (quadrant, lperm), = draw_shuffle_plan(cfg, rng, kind="local")
    v = torch.as_tensor(np.asarray(v, dtype=np.float64))
    panels = (v, global_shuffle(v, cfg.grid, gperm), local_shuffle(v, quadrant, lperm))

    png_path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    for ax, img, title in zip(axes, panels, ("original", f"global {grid[0]}x{grid[1]}", f"local (quadrant {quadrant})")):
        ax.imshow(grid_to_uint8(img.numpy()), interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def caption_diff(original: TokenSequence, adversarial: TokenSequence) -> str:
    """word-level diff, substitutions marked [old→new]"""
    a, b = original.text.split(), adversarial.text.split()
    if len(a) != len(b):
        return f"[{original.text}→{adversarial.text}]"
    return " ".join(x if x == y else f"[{x}→{y}]" for x, y in zip(a, b))


# ---------------------------
# Plots
# ---------------------------
def plot_asr_bars(frame: pd.DataFrame, png_path: Path, metric: str = "tr_asr1") -> None:
    """median ASR per attack, one bar group per target; data written as <png>.csv"""
    data = frame.groupby(["attack", "target"], sort=True)[metric].median().unstack("target")
    png_path.parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(png_path.with_suffix(".csv"), float_format="%.6f")
    fig, ax = plt.subplots(figsize=(max(5.0, 0.8 * len(data)), 3.5))
    width = 0.8 / max(1, len(data.columns))
    x = np.arange(len(data))
    for i, target in enumerate(data.columns):
        ax.bar(x + i * width, data[target].to_numpy(dtype=float), width, label=target)
    ax.set_xticks(x + width * (len(data.columns) - 1) / 2)
    ax.set_xticklabels(data.index, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"{metric} (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def ablation_summary(frame: pd.DataFrame, param: str, values: Sequence) -> pd.DataFrame:
    """mean and std over seeds per (value, target), values kept in sweep order"""
    order = {str(v): i for i, v in enumerate(values)}
    metrics = [m for m in ("tr_asr1", "ir_asr1", "adv_tr_r1", "adv_ir_r1") if m in frame.columns]
    frame = frame.assign(value=frame["value"].astype(str))
    grouped = frame.groupby(["value", "target", "white_box"], sort=False)[metrics]
    mean = grouped.mean().add_suffix("_mean")
    std = grouped.std(ddof=0).add_suffix("_std")
    out = pd.concat([mean, std], axis=1).reset_index()
    out["n_seeds"] = grouped.size().to_numpy()
    out.insert(0, "param", param)
    out = out.sort_values(["value", "target"], key=lambda s: s.map(order) if s.name == "value" else s)
    return out.reset_index(drop=True)


def plot_ablation(summary: pd.DataFrame, param: str, target: str, png_path: Path) -> None:
    """mean +- std of TR/IR ASR@1 against the swept value; data written as <png>.csv"""
    data = summary[summary["target"] == target].reset_index(drop=True)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(png_path.with_suffix(".csv"), index=False, float_format="%.6f")
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    x = np.arange(len(data))
    for metric, label in (("tr_asr1", "TR ASR@1"), ("ir_asr1", "IR ASR@1")):
        ax.errorbar(x, data[f"{metric}_mean"].to_numpy(dtype=float), yerr=data[f"{metric}_std"].to_numpy(dtype=float), marker="o", capsize=3, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(data["value"].tolist())
    ax.set_xlabel(param)
    ax.set_ylabel("ASR (%)")
    ax.set_title(f"{param} sweep on {target}", fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


# ---------------------------
# Bundle
# ---------------------------
def build_report(config: ExperimentConfig, layout: RunLayout, dataset: ShapeCaptionDataset) -> Path:
    if not layout.baseline_csv.exists():
        raise MissingArtifactError(layout.baseline_csv, f"missing artifact: {layout.baseline_csv} (run `lssa-lab eval` first)")
    out = layout.report_dir
    out.mkdir(parents=True, exist_ok=True)
    lines: List[str] = [f"# lssa-lab report: {layout.root}", ""]

    baseline = pd.read_csv(layout.baseline_csv)
    write_table(baseline, out / "baseline.csv")
    lines += ["## Clean retrieval (R@k, %)", "", markdown_table(baseline.round(2))]

    frame = pd.read_csv(layout.matrix_csv) if layout.matrix_csv.exists() else pd.DataFrame()
    if frame.empty:
        lines += ["No attack pipelines were run; baseline metrics only.", ""]
    else:
        asr = transfer_table(frame)
        write_table(asr, out / "transfer_asr.csv", out / "transfer_asr.md")
        r1 = transfer_table(frame, R1_PAIR)
        write_table(r1, out / "transfer_r1.csv", out / "transfer_r1.md")
        lines += ["## Attack success rate, TR / IR @1 (%, median over seeds, * white-box)", "", markdown_table(asr)]
        lines += ["## Retrieval after attack, TR / IR R@1 (%)", "", markdown_table(r1)]

        ladder = ladder_table(frame)
        if not ladder.empty:
            write_table(ladder, out / "ladder.csv", out / "ladder.md")
            lines += ["## Ablation ladder (ASR TR / IR @1)", "", markdown_table(ladder)]

        plot_asr_bars(frame, out / "plots" / "asr_tr1.png", "tr_asr1")
        plot_asr_bars(frame, out / "plots" / "asr_ir1.png", "ir_asr1")
        lines += ["![TR ASR@1](plots/asr_tr1.png)", "", "![IR ASR@1](plots/asr_ir1.png)", ""]

    lines += _sample_section(config, layout, dataset, out)
    lines += _ablation_section(config, layout)

    layout.report_index.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"[report] written -> {layout.report_index}")
    return layout.report_index


def _sample_section(config: ExperimentConfig, layout: RunLayout, dataset: ShapeCaptionDataset, out: Path) -> List[str]:
    lines: List[str] = []
    sample = list(dataset.test_ids[: config.report.sample_pairs])
    if not sample:
        return lines

    shuffle_png = out / "shuffles" / "shuffles.png"
    save_shuffle_panels(dataset.get(sample[0]).image, shuffle_png, grid=config.budget.shuffle.grid)
    lines += ["## Global vs local shuffle", "", "![shuffles](shuffles/shuffles.png)", ""]

    seed, source = config.seeds[0], config.source_tags[0]
    diffs: List[str] = []
    for pipeline in config.pipelines:
        npz, js = layout.attack(seed, source, pipeline)
        if not (npz.exists() and js.exists()):
            continue
        outcomes = load_outcomes(npz, js, dataset.vocabulary)
        lines += [f"### {pipeline} (seed {seed}, source {source})", ""]
        for pid in sample:
            item, outcome = dataset.get(pid), outcomes[pid]
            rel = Path("triptychs") / pipeline / f"pair{pid:05d}.png"
            save_triptych(item.image, outcome.v_adv.numpy(), config.report.amplification, out / rel)
            lines.append(f"![{pipeline} pair {pid}]({rel.as_posix()})")
            for orig, adv in zip(item.captions, outcome.t_adv):
                if orig.ids != adv.ids:
                    diffs.append(f"| {pipeline} | {pid} | {caption_diff(orig, adv)} |")
        lines.append("")
    if diffs:
        lines += ["## Caption changes", "", "| attack | pair | caption |", "|---|---|---|", *diffs, ""]
    return lines


def _ablation_section(config: ExperimentConfig, layout: RunLayout) -> List[str]:
    spec = config.ablation
    if spec is None or not layout.ablation_csv(spec.param).exists():
        return []
    summary = pd.read_csv(layout.ablation_csv(spec.param))
    lines = [f"## Sweep over {spec.param} ({spec.pipeline})", "", markdown_table(summary.round(2))]
    for target in sorted(summary["target"].unique()):
        rel = layout.ablation_plot(spec.param, target).relative_to(layout.root)
        lines.append(f"![{spec.param} on {target}](../{rel.as_posix()})")
    return lines + [""]
