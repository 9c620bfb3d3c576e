import unittest

import numpy as np
import pandas as pd

from lssa_lab.data import Vocabulary
from lssa_lab.report import (
    ablation_summary,
    caption_diff,
    ladder_table,
    markdown_table,
    perturbation_panel,
    plot_ablation,
    plot_asr_bars,
    save_shuffle_panels,
    save_triptych,
    transfer_table,
)
from tests.helpers import TempDirTestCase, tiny_dataset


def frame():
    rows = []
    for seed, (tr, ir) in enumerate([(10.0, 20.0), (30.0, 40.0), (50.0, 60.0)]):
        for target, white in (("conv-s0", True), ("patch-s0", False)):
            rows.append({"source": "conv-s0", "target": target, "attack": "lssa", "seed": seed, "white_box": white, "tr_asr1": tr, "ir_asr1": ir})
    rows.append({"source": "conv-s0", "target": "patch-s0", "attack": "sga_it", "seed": 0, "white_box": False, "tr_asr1": None, "ir_asr1": 5.0})
    return pd.DataFrame(rows)


class TableTest(unittest.TestCase):
    def test_transfer_table_medians_and_stars(self):
        table = transfer_table(frame())
        self.assertEqual(list(table.columns), ["source", "attack", "conv-s0", "patch-s0"])
        lssa = table[table["attack"] == "lssa"].iloc[0]
        self.assertEqual(lssa["conv-s0"], "30.0 / 40.0*")
        self.assertEqual(lssa["patch-s0"], "30.0 / 40.0")
        sga = table[table["attack"] == "sga_it"].iloc[0]
        self.assertEqual(sga["patch-s0"], "n/a / 5.0")

    def test_ladder_keeps_step_order(self):
        ladder = ladder_table(frame())
        self.assertEqual(ladder["attack"].tolist(), ["sga_it", "lssa"])
        self.assertEqual(ladder["step"].iloc[0], "image-text")

    def test_markdown(self):
        md = markdown_table(pd.DataFrame({"a": [1], "b": ["x"]}))
        self.assertEqual(md, "| a | b |\n|---|---|\n| 1 | x |\n")

    def test_empty_tables(self):
        self.assertTrue(transfer_table(pd.DataFrame()).empty)
        self.assertTrue(ladder_table(pd.DataFrame()).empty)

    def test_ablation_summary(self):
        rows = []
        for value in (0, 5):
            for seed in range(2):
                rows.append({"value": value, "target": "patch-s0", "white_box": False, "tr_asr1": 10.0 * (seed + 1) + value, "ir_asr1": 1.0})
        out = ablation_summary(pd.DataFrame(rows), "N", [0, 5])
        self.assertEqual(out["value"].tolist(), ["0", "5"])
        self.assertEqual(out["tr_asr1_mean"].tolist(), [15.0, 20.0])
        self.assertEqual(out["tr_asr1_std"].tolist(), [5.0, 5.0])
        self.assertEqual(out["n_seeds"].tolist(), [2, 2])


class ImageTest(TempDirTestCase):
    def test_panel_is_mid_gray_without_change(self):
        v = np.random.default_rng(0).random((3, 4, 4))
        self.assertTrue(np.array_equal(perturbation_panel(v, v, 40.0), np.full((3, 4, 4), 0.5)))
        shifted = perturbation_panel(v, v + 0.01, 10.0)
        self.assertTrue(np.allclose(shifted, 0.6))

    def test_triptych_files(self):
        item = tiny_dataset().items[0]
        png = self.tmp / "trip" / "pair0.png"
        panel = save_triptych(item.image, np.clip(item.image + 2 / 255, 0, 1), 40.0, png)
        self.assertTrue(png.exists())
        with np.load(png.with_suffix(".npz")) as arrays:
            self.assertTrue(np.array_equal(arrays["panel"], panel))

    def test_shuffle_panels(self):
        png = self.tmp / "shuffles.png"
        save_shuffle_panels(tiny_dataset().items[0].image, png)
        self.assertTrue(png.exists())

    def test_plots_write_their_data(self):
        png = self.tmp / "plots" / "asr.png"
        plot_asr_bars(frame(), png)
        self.assertTrue(png.exists())
        self.assertTrue(png.with_suffix(".csv").exists())
        summary = ablation_summary(frame().assign(value=frame()["seed"]), "N", [0, 1, 2])
        plot_ablation(summary, "N", "patch-s0", self.tmp / "plots" / "n.png")
        self.assertTrue((self.tmp / "plots" / "n.csv").exists())


class CaptionDiffTest(unittest.TestCase):
    def test_marks_substitution(self):
        vocab = Vocabulary.from_grammar()
        a = vocab.tokenize("a red circle at the top left")
        b = vocab.tokenize("a blue circle at the top left")
        self.assertEqual(caption_diff(a, b), "a [red→blue] circle at the top left")
        self.assertEqual(caption_diff(a, a), a.text)


if __name__ == "__main__":
    unittest.main()
