import contextlib
import io
import json
import unittest

import numpy as np
import pandas as pd

from lssa_lab import cli
from lssa_lab.errors import ConfigError, MissingArtifactError
from lssa_lab.harness import Lab, cmd_attack, cmd_eval, cmd_gen_data, cmd_report, cmd_train, read_report
from tests.helpers import TempDirTestCase, tiny_config


class LabTest(TempDirTestCase):
    def setUp(self):
        super().setUp()
        self.config = tiny_config(self.tmp / "run")
        self.layout = Lab(self.config).layout

    def test_eval_before_attack_names_the_missing_command(self):
        with self.assertRaises(MissingArtifactError) as ctx:
            cmd_eval(self.config)
        self.assertIn("lssa-lab gen-data", ctx.exception.detail)

        cmd_gen_data(self.config)
        cmd_train(self.config)
        with self.assertRaises(MissingArtifactError) as ctx:
            cmd_eval(self.config)
        self.assertIn("lssa-lab attack", ctx.exception.detail)

    def test_full_chain_then_idempotent(self):
        self.assertEqual(cmd_gen_data(self.config), ["gen-data"])
        self.assertEqual(sorted(cmd_train(self.config)), ["train:conv-s0", "train:patch-s0"])
        self.assertEqual(len(cmd_attack(self.config)), 2)
        cmd_eval(self.config)
        cmd_report(self.config)

        report = read_report(self.layout.report(0, "conv-s0", "lssa", "patch-s0"))
        self.assertFalse(report.white_box)
        self.assertEqual(len(report.per_pair), 4)
        self.assertTrue(read_report(self.layout.report(0, "conv-s0", "pgd", "conv-s0")).white_box)
        matrix = pd.read_csv(self.layout.matrix_csv)
        self.assertEqual(len(matrix), 4)
        self.assertTrue(self.layout.report_index.exists())
        self.assertIn("TR / IR", self.layout.report_index.read_text(encoding="utf-8"))
        self.assertEqual(pd.read_csv(self.layout.baseline_csv)["model"].tolist(), ["conv-s0", "patch-s0"])

        self.assertEqual(Lab(self.config).run("all"), [])

    def test_attack_bytes_are_reproducible(self):
        cmd_gen_data(self.config)
        cmd_train(self.config)
        cmd_attack(self.config)
        npz, js = self.layout.attack(0, "conv-s0", "lssa")
        with np.load(npz) as arrays:
            first = arrays["v_adv"].copy()
        first_json = js.read_text(encoding="utf-8")
        ran = Lab(self.config).run("attack", force=True)
        self.assertEqual(sorted(ran), ["attack:seed0:conv-s0:lssa", "attack:seed0:conv-s0:pgd"])
        with np.load(npz) as arrays:
            self.assertTrue(np.array_equal(arrays["v_adv"], first))
        self.assertEqual(js.read_text(encoding="utf-8"), first_json)

    def test_rerun_reproduces_every_csv(self):
        tables = []
        for name in ("first", "second"):
            config = tiny_config(self.tmp / name, ablation={"param": "lam", "values": [0.0, 1.0]})
            Lab(config).run("all")
            root = self.tmp / name
            tables.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))})
        self.assertIn("eval/transfer_matrix.csv", tables[0])
        self.assertEqual(sorted(tables[0]), sorted(tables[1]))
        for rel, data in tables[0].items():
            self.assertEqual(data, tables[1][rel], rel)

    def test_config_change_makes_attacks_stale(self):
        Lab(self.config).run("all")
        changed = self.config.model_copy(update={"budget": self.config.budget.with_updates(steps=2)})
        ran = Lab(changed).run("attack")
        self.assertEqual(sorted(ran), ["attack:seed0:conv-s0:lssa", "attack:seed0:conv-s0:pgd"])
        self.assertEqual(Lab(changed).run("train"), [])

    def test_ablation_sweep(self):
        config = tiny_config(self.tmp / "run", ablation={"param": "N", "values": [0, 1]})
        cmd_gen_data(config)
        cmd_train(config)
        ran = Lab(config).run("ablate")
        self.assertIn("ablate:N:summary", ran)
        summary = pd.read_csv(Lab(config).layout.ablation_csv("N"))
        self.assertEqual(summary["value"].astype(str).unique().tolist(), ["0", "1"])
        self.assertTrue((summary["n_seeds"] == 1).all())
        self.assertTrue(Lab(config).layout.ablation_plot("N", "patch-s0").exists())

    def test_ablate_without_sweep(self):
        with self.assertRaises(ConfigError):
            Lab(self.config).run("ablate")


class CliTest(TempDirTestCase):
    def setUp(self):
        super().setUp()
        self.cfg_path = self.tmp / "config.json"
        self.cfg_path.write_text(tiny_config(self.tmp / "run").model_dump_json(), encoding="utf-8")

    def invoke(self, *argv):
        err = io.StringIO()
        with contextlib.redirect_stderr(err):
            code = cli.run(list(argv) + ["--config", str(self.cfg_path), "--no-progress"])
        records = [json.loads(line) for line in err.getvalue().splitlines() if line.startswith('{"error"')]
        return code, records

    def test_success_and_missing_artifact(self):
        self.assertEqual(self.invoke("gen-data")[0], 0)
        code, records = self.invoke("train", "--out", str(self.tmp / "elsewhere"))
        self.assertEqual(code, 3)
        self.assertEqual(records[-1]["error"], "missing_artifact")
        self.assertEqual(records[-1]["exit_code"], 3)

    def test_config_errors_exit_2(self):
        code, records = self.invoke("ablate", "--param", "N")
        self.assertEqual(code, 2)
        self.assertEqual(records[-1]["error"], "invalid_config")
        code, _ = self.invoke("ablate", "--param", "lam", "--values", "0.5,3")
        self.assertEqual(code, 2)

    def test_parse_values(self):
        self.assertEqual(cli.parse_values("0, 5,10"), [0, 5, 10])
        self.assertEqual(cli.parse_values("top_left,random"), ["top_left", "random"])
        self.assertEqual(cli.parse_values("0.5,1"), [0.5, 1])


if __name__ == "__main__":
    unittest.main()
