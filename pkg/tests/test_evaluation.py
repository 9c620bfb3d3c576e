import unittest

import numpy as np

from lssa_lab.attacks import AttackOutcome
from lssa_lab.errors import ConfigError, EmptyInputError, ShapeMismatchError
from lssa_lab.evaluation import (
    REPORT_COLUMNS,
    RetrievalIndex,
    TransferReport,
    attack_success_rate,
    baseline_metrics,
    build_index,
    evaluate_transfer,
    query_ranks,
    recall_at_k,
    reports_frame,
    success_rate_from_ranks,
    transfer_matrix,
)
from tests.helpers import small_budget, tiny_dataset, tiny_pair


def index(images, texts, owner):
    return RetrievalIndex.from_embeddings(np.asarray(images, dtype=float), np.asarray(texts, dtype=float), owner)


class RankingTest(unittest.TestCase):
    def setUp(self):
        # three images on the axes, one caption each, caption 2 points at image 0
        self.idx = index(np.eye(3), [[1, 0, 0], [0, 1, 0], [1, 0, 0.1]], [0, 1, 2])

    def test_ranks(self):
        self.assertEqual(query_ranks(self.idx, "TR").tolist(), [0, 0, 0])
        self.assertEqual(query_ranks(self.idx, "IR").tolist(), [0, 0, 1])

    def test_recall(self):
        self.assertEqual(recall_at_k(self.idx, 1, "TR"), 100.0)
        self.assertAlmostEqual(recall_at_k(self.idx, 1, "IR"), 200 / 3)
        self.assertEqual(recall_at_k(self.idx, 2, "IR"), 100.0)
        self.assertEqual(recall_at_k(self.idx, 1, "IR", queries=[2]), 0.0)

    def test_ties_count_against_the_query(self):
        tied = index([[1, 0], [1, 0]], [[1, 0], [1, 0]], [0, 1])
        self.assertEqual(query_ranks(tied, "TR").tolist(), [1, 1])
        self.assertEqual(query_ranks(tied, "IR").tolist(), [1, 1])
        self.assertEqual(recall_at_k(tied, 1, "TR"), 0.0)
        self.assertEqual(recall_at_k(tied, 2, "IR"), 100.0)

    def test_identical_gallery_entries_cannot_be_hits(self):
        # two images collapsed onto one embedding: neither is retrieved at rank 0
        idx = index([[1, 0], [1, 0], [0, 1]], np.eye(2)[[0, 0, 1]], [0, 1, 2])
        self.assertEqual(query_ranks(idx, "IR").tolist(), [1, 1, 0])

    def test_recall_grows_with_k(self):
        rng = np.random.default_rng(0)
        owner = np.repeat(np.arange(6), 3)
        idx = index(rng.normal(size=(6, 4)), rng.normal(size=(18, 4)), owner)
        for direction in ("TR", "IR"):
            values = [recall_at_k(idx, k, direction) for k in range(1, idx.gallery_size(direction) + 1)]
            self.assertEqual(values, sorted(values))
            self.assertEqual(values[-1], 100.0)

    def test_tr_and_ir_are_dual(self):
        # one caption per image: TR on (images, texts) is IR with the roles swapped
        rng = np.random.default_rng(1)
        images, texts = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
        texts[3] = images[5]
        owner = list(range(7))
        forward, swapped = index(images, texts, owner), index(texts, images, owner)
        self.assertEqual(query_ranks(forward, "TR").tolist(), query_ranks(swapped, "IR").tolist())
        self.assertEqual(query_ranks(forward, "IR").tolist(), query_ranks(swapped, "TR").tolist())
        for k in (1, 3, 5):
            self.assertAlmostEqual(recall_at_k(forward, k, "TR"), recall_at_k(swapped, k, "IR"))

    def test_tr_uses_best_caption(self):
        idx = index(np.eye(2), [[0, 1], [1, 0], [0, 1]], [0, 0, 1])
        self.assertEqual(query_ranks(idx, "TR").tolist(), [0, 1])

    def test_k_contracts(self):
        with self.assertRaises(ConfigError) as ctx:
            recall_at_k(self.idx, 5, "TR")
        self.assertEqual(ctx.exception.code, "k_too_large")
        with self.assertRaises(ConfigError):
            recall_at_k(self.idx, 0, "TR")
        with self.assertRaises(ConfigError):
            query_ranks(self.idx, "XR")

    def test_empty_gallery(self):
        with self.assertRaises(EmptyInputError):
            index(np.zeros((0, 2)), [[1, 0]], [0])


class SuccessRateTest(unittest.TestCase):
    def test_only_clean_hits_count(self):
        self.assertAlmostEqual(success_rate_from_ranks(np.array([0, 0, 3, 0]), np.array([2, 0, 0, 1]), k=1), 200 / 3)

    def test_no_eligible_queries(self):
        self.assertIsNone(success_rate_from_ranks(np.array([2, 3]), np.array([0, 0]), k=1))

    def test_at_k(self):
        self.assertEqual(success_rate_from_ranks(np.array([1, 4, 9]), np.array([4, 5, 0]), k=5), 50.0)

    def test_length_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            success_rate_from_ranks(np.array([0]), np.array([0, 1]))

    def test_index_level(self):
        clean = index(np.eye(3), np.eye(3), [0, 1, 2])
        adv = index(np.eye(3), [[0, 1, 0], [0, 1, 0], [0, 0, 1]], [0, 1, 2])
        self.assertAlmostEqual(attack_success_rate(clean, adv, 1, "TR"), 100 / 3)
        self.assertEqual(attack_success_rate(clean, clean, 1, "IR"), 0.0)


class TransferTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.ds = tiny_dataset()
        cls.source, cls.target = tiny_pair("conv", 0), tiny_pair("patch", 0)
        cls.identity = {
            it.pair_id: AttackOutcome("none", it.pair_id, it.tensor().double(), tuple(it.captions)) for it in cls.ds.split("test")
        }

    def test_identity_attack_has_zero_success(self):
        report = evaluate_transfer(self.target, self.ds, self.identity, self.source.tag, "none", 0)
        self.assertFalse(report.white_box)
        self.assertEqual(report.target, "patch-s0")
        for key in ("tr_asr1", "ir_asr1"):
            self.assertIn(report.metrics[key], (None, 0.0))
        self.assertEqual(report.metrics["clean_tr_r1"], report.metrics["adv_tr_r1"])
        self.assertEqual(len(report.per_pair), len(self.ds.test_ids))
        self.assertTrue(all(p.linf == 0.0 and p.captions_changed == 0 for p in report.per_pair))

    def test_white_box_flag(self):
        report = evaluate_transfer(self.source, self.ds, self.identity, self.source.tag, "none", 0)
        self.assertTrue(report.white_box)

    def test_missing_pairs(self):
        partial = dict(list(self.identity.items())[:-1])
        with self.assertRaises(ShapeMismatchError):
            evaluate_transfer(self.target, self.ds, partial, "conv-s0", "none", 0)

    def test_adversarial_index_swaps_entries(self):
        pid = self.ds.test_ids[0]
        other = self.ds.get(self.ds.test_ids[1])
        swapped = build_index(self.source, self.ds, images={pid: other.tensor()})
        clean = build_index(self.source, self.ds)
        self.assertTrue(np.allclose(swapped.image_embeddings[0], clean.image_embeddings[1]))
        self.assertTrue(np.array_equal(swapped.text_embeddings, clean.text_embeddings))

    def test_report_rates_validated(self):
        with self.assertRaises(ValueError):
            TransferReport(source="a", target="b", attack="x", seed=0, white_box=False, metrics={"tr_asr1": 120.0})

    def test_matrix(self):
        reports = transfer_matrix([self.source, self.target], ["pgd"], self.ds, small_budget(steps=1), seeds=[0], sources=["conv-s0"])
        self.assertEqual([(r.source, r.attack, r.target) for r in reports], [("conv-s0", "pgd", "conv-s0"), ("conv-s0", "pgd", "patch-s0")])
        frame = reports_frame(reports)
        self.assertEqual(len(frame), 2)
        self.assertIn("tr_asr1", frame.columns)
        with self.assertRaises(ConfigError):
            transfer_matrix([self.source], ["pgd"], self.ds, small_budget())

    def test_baseline_and_empty_frame(self):
        row = baseline_metrics(self.source, self.ds)
        self.assertEqual(row["model"], "conv-s0")
        self.assertIn("tr_r10", row)
        self.assertNotIn("ir_r10", row)  # IR ranks among only 4 test images
        self.assertEqual(list(reports_frame([]).columns), REPORT_COLUMNS)


if __name__ == "__main__":
    unittest.main()
