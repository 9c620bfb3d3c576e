import os
import unittest

import numpy as np
import torch

from lssa_lab.artifacts import ArtifactGraph, RunLayout, Step, load_outcomes, save_outcomes, write_if_changed
from lssa_lab.attacks import AttackOutcome
from lssa_lab.errors import ArtifactCycleError, ConfigError, MissingArtifactError, SchemaVersionError
from tests.helpers import TempDirTestCase, tiny_dataset


def bump_mtime(path, delta_ns=5_000_000_000):
    st = path.stat()
    os.utime(path, ns=(st.st_atime_ns, st.st_mtime_ns + delta_ns))


class ArtifactGraphTest(TempDirTestCase):
    def setUp(self):
        super().setUp()
        self.calls = []
        self.src = self.tmp / "src.txt"
        self.mid = self.tmp / "mid.txt"
        self.out = self.tmp / "out.txt"
        self.src.write_text("x", encoding="utf-8")
        self.graph = ArtifactGraph()
        self.graph.add("make-mid", "mid", [self.src], [self.mid], lambda: self._touch("make-mid", self.mid))
        self.graph.add("make-out", "out", [self.mid], [self.out], lambda: self._touch("make-out", self.out))

    def _touch(self, name, path):
        self.calls.append(name)
        path.write_text(name, encoding="utf-8")

    def test_order_follows_dependencies(self):
        self.assertEqual(self.graph.order(), ["make-mid", "make-out"])
        self.assertEqual(self.graph.dependencies("make-out"), {"make-mid"})

    def test_missing_upstream_names_the_command(self):
        with self.assertRaises(MissingArtifactError) as ctx:
            self.graph.run(self.graph.select("out"))
        self.assertIn("lssa-lab mid", ctx.exception.detail)
        self.assertEqual(ctx.exception.exit_code, 3)
        self.assertEqual(self.calls, [])

    def test_upstream_build_then_skip(self):
        self.assertEqual(self.graph.run(["make-out"], upstream=True), ["make-mid", "make-out"])
        self.assertEqual(self.graph.run(None), [])

    def test_stale_input_triggers_recompute(self):
        self.graph.run(None)
        bump_mtime(self.src)
        self.assertEqual(self.graph.run(["make-mid"]), ["make-mid"])
        self.assertTrue(self.graph.steps["make-out"].is_stale())

    def test_force_only_applies_to_targets(self):
        self.graph.run(None)
        self.calls.clear()
        self.assertEqual(self.graph.run(["make-out"], force=True), ["make-out"])

    def test_cycles_are_refused(self):
        a, b = self.tmp / "a", self.tmp / "b"
        graph = ArtifactGraph()
        graph.add("one", "x", [a], [b], lambda: None)
        graph.add("two", "x", [b], [a], lambda: None)
        with self.assertRaises(ArtifactCycleError) as ctx:
            graph.order()
        self.assertEqual(ctx.exception.code, "artifact_cycle")

    def test_duplicate_producers(self):
        with self.assertRaises(ConfigError):
            self.graph.add("again", "mid", [], [self.mid], lambda: None)

    def test_missing_leaf_input(self):
        self.src.unlink()
        with self.assertRaises(MissingArtifactError):
            self.graph.run(["make-mid"])

    def test_step_without_outputs_is_always_stale(self):
        self.assertTrue(Step("s", "c", [], [], lambda: None).is_stale())


class LayoutTest(TempDirTestCase):
    def test_paths(self):
        lay = RunLayout(self.tmp)
        npz, js = lay.attack(2, "conv-s0", "lssa")
        self.assertEqual(npz.relative_to(self.tmp).as_posix(), "attacks/seed2/conv-s0/lssa.npz")
        self.assertEqual(js.suffix, ".json")
        self.assertEqual(lay.model("patch-s0").name, "patch-s0.ckpt")
        self.assertIn("N=5", lay.ablation_report("N", 5, 0, "conv-s1").as_posix())

    def test_write_if_changed_keeps_mtime(self):
        path = self.tmp / "cfg.json"
        self.assertTrue(write_if_changed(path, "a\n"))
        before = path.stat().st_mtime_ns
        self.assertFalse(write_if_changed(path, "a\n"))
        self.assertEqual(path.stat().st_mtime_ns, before)
        self.assertTrue(write_if_changed(path, "b\n"))


class OutcomeFilesTest(TempDirTestCase):
    def setUp(self):
        super().setUp()
        ds = tiny_dataset()
        vocab = ds.vocabulary
        self.vocab = vocab
        self.outcomes = {}
        for it in ds.split("test"):
            t = list(it.captions)
            t[0] = vocab.replace(t[0], 1, vocab.class_members(t[0].ids[1])[0])
            self.outcomes[it.pair_id] = AttackOutcome(
                "lssa", it.pair_id, it.tensor().double() + 1e-3, tuple(t), trace=[0.1, 0.2], seeds={"image": 7}
            )
        self.npz, self.js = RunLayout(self.tmp).attack(0, "conv-s0", "lssa")

    def test_outcomes_survive_disk(self):
        save_outcomes(self.outcomes, self.npz, self.js, {"pipeline": "lssa", "seed": 0})
        loaded = load_outcomes(self.npz, self.js, self.vocab)
        self.assertEqual(list(loaded), sorted(self.outcomes))
        for pid, out in self.outcomes.items():
            self.assertTrue(torch.equal(loaded[pid].v_adv, out.v_adv))
            self.assertEqual([t.ids for t in loaded[pid].t_adv], [t.ids for t in out.t_adv])
            self.assertEqual(loaded[pid].seeds, {"image": 7})

    def test_version_and_consistency_checks(self):
        save_outcomes(self.outcomes, self.npz, self.js, {})
        text = self.js.read_text(encoding="utf-8").replace('"schema_version": 1', '"schema_version": 2')
        self.js.write_text(text, encoding="utf-8")
        with self.assertRaises(SchemaVersionError):
            load_outcomes(self.npz, self.js, self.vocab)
        self.js.write_text(text.replace('"schema_version": 2', '"schema_version": 1'), encoding="utf-8")
        with np.load(self.npz) as arrays:
            v_adv = arrays["v_adv"]
        np.savez_compressed(self.npz, pair_ids=np.array([999]), v_adv=v_adv[:1])
        with self.assertRaises(SchemaVersionError):
            load_outcomes(self.npz, self.js, self.vocab)
        with self.assertRaises(MissingArtifactError):
            load_outcomes(self.npz, self.tmp / "absent.json", self.vocab)


if __name__ == "__main__":
    unittest.main()
