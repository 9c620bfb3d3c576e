import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

from lssa_lab import harness
from lssa_lab.config import LOG_LEVEL_ENV, ExperimentConfig
from lssa_lab.errors import EXIT_INTERNAL, EXIT_OK, ConfigError, LabError

logger = logging.getLogger("lssa_lab")

COMMAND_FUNCS: Dict[str, Callable[..., List[str]]] = {
    "gen-data": harness.cmd_gen_data,
    "train": harness.cmd_train,
    "attack": harness.cmd_attack,
    "eval": harness.cmd_eval,
    "ablate": harness.cmd_ablate,
    "report": harness.cmd_report,
    "all": harness.cmd_all,
}


def parse_values(raw: str) -> List[Any]:
    """'0,5,10' -> [0, 5, 10]; non-JSON items stay strings ('top_left,random')"""
    out: List[Any] = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            out.append(json.loads(item))
        except json.JSONDecodeError:
            out.append(item)
    return out


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "output_dir": args.out,
        "workers": args.workers,
    }
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.no_progress:
        overrides["show_progress"] = False
    if args.param or args.values:
        if not (args.param and args.values):
            raise ConfigError("--param and --values must be given together")
        overrides["ablation"] = {"param": args.param, "values": parse_values(args.values), "pipeline": args.pipeline}
    return overrides


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lssa-lab", description="transferable multimodal adversarial attack lab")
    sub = p.add_subparsers(dest="cmd", required=True)

    for name in COMMAND_FUNCS:
        ps = sub.add_parser(name)
        ps.add_argument("--config", default=None, help="experiment config (JSON)")
        ps.add_argument("--seed", type=int, default=None, help="run a single seed K instead of the configured list")
        ps.add_argument("--out", default=None, help="output directory")
        ps.add_argument("--workers", type=int, default=None)
        ps.add_argument("--force", action="store_true", help="recompute the command's own steps even when fresh")
        ps.add_argument("--no-progress", action="store_true")
        if name in ("ablate", "all", "report"):
            ps.add_argument("--param", default=None, help="N | position_mode | lam | momentum | eps0 | M")
            ps.add_argument("--values", default=None, help="comma separated sweep values")
            ps.add_argument("--pipeline", default="lssa")
        ps.set_defaults(func=COMMAND_FUNCS[name], param=None, values=None, pipeline="lssa")
    return p


def setup_logging() -> None:
    level = os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        config = ExperimentConfig.load(args.config, config_overrides(args))
        ran = args.func(config, force=args.force)
        logger.info(f"[{args.cmd}] done: {len(ran)} step(s) ran, output in {config.out}")
        return EXIT_OK
    except LabError as e:
        print(json.dumps(e.to_record(), ensure_ascii=False), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("[internal] unexpected failure")
        record = {"error": "internal", "detail": f"{type(e).__name__}: {e}", "exit_code": EXIT_INTERNAL}
        print(json.dumps(record, ensure_ascii=False), file=sys.stderr)
        return EXIT_INTERNAL
