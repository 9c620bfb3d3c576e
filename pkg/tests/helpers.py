"""Shared fixtures: a tiny shape dataset, untrained encoder pairs, small budgets and configs."""

import functools
import os
import shutil
import tempfile
import unittest
from pathlib import Path

import torch

from lssa_lab.config import AttackBudget, ExperimentConfig, TrainConfig
from lssa_lab.data import ShapeCaptionDataset, generate_dataset
from lssa_lab.models import EncoderPair, train_contrastive

SLOW_TESTS = os.getenv("LSSA_LAB_SLOW_TESTS") == "1"

TINY_DATASET = {"num_images": 12, "image_size": (16, 16), "seed": 3}


@functools.lru_cache(maxsize=None)
def tiny_dataset() -> ShapeCaptionDataset:
    return generate_dataset(TINY_DATASET)


@functools.lru_cache(maxsize=None)
def tiny_pair(arch: str = "conv", seed: int = 0, tag: str = "") -> EncoderPair:
    """untrained (epochs=0) pair; deterministic in (arch, seed)"""
    config = TrainConfig(tag=tag or f"{arch}-s{seed}", arch=arch, seed=seed, epochs=0, d=16)
    return train_contrastive(tiny_dataset(), config)


def float64_pair(arch: str = "conv", seed: int = 0) -> EncoderPair:
    config = TrainConfig(tag=f"{arch}-s{seed}-f64", arch=arch, seed=seed, epochs=0, d=16)
    return train_contrastive(tiny_dataset(), config).to(torch.float64)


def small_budget(**changes) -> AttackBudget:
    base = AttackBudget(steps=2, num_candidates=3).with_updates(N=2, M=2)
    return base.with_updates(**changes) if changes else base


def tiny_config(out: Path, **changes) -> ExperimentConfig:
    data = {
        "dataset": dict(TINY_DATASET),
        "models": [
            {"tag": "conv-s0", "arch": "conv", "seed": 0, "epochs": 0, "d": 16},
            {"tag": "patch-s0", "arch": "patch", "seed": 0, "epochs": 0, "d": 16},
        ],
        "budget": small_budget(steps=1, N=1, M=1).model_dump(mode="json"),
        "pipelines": ["pgd", "lssa"],
        "seeds": [0],
        "output_dir": str(out),
        "workers": 1,
        "show_progress": False,
        "report": {"sample_pairs": 1},
    }
    data.update(changes)
    return ExperimentConfig.model_validate(data)


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp(prefix="lssa-lab-test-"))

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)
