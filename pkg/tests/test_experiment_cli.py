import json
import subprocess
import sys

import numpy as np
import pytest

from casseg import cli
from casseg import experiment as xp
from casseg.dataio import SyntheticConfig, ValidationError, load_dataset
from casseg.finetune import FinetuneConfig
from casseg.network import NetworkConfig, read_checkpoint_extra
from casseg.pretrain import PretrainConfig


def tiny_config(out_dir, **overrides) -> xp.ExperimentConfig:
    cfg = xp.ExperimentConfig(
        synthetic=SyntheticConfig(
            n_labeled=14, n_unlabeled=10, height=16, width=16, channels=3, num_classes=3, modes_per_class=2, seed=5
        ),
        network=NetworkConfig(in_channels=3, num_classes=3, depth=2, base_channels=4),
        pretrain=PretrainConfig(phase1_epochs=2, phase2_epochs=2, batch_size=8, target_update_interval=4, k=3),
        finetune=FinetuneConfig(epochs=2, batch_size=4),
        methods=["cas", "scratch"],
        few_shot_sizes=[4],
        seeds=[0],
        eval_patches=5,
        out_dir=str(out_dir),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def metric_fields(report):
    return (report.per_class_f1, report.mean_f1, report.weighted_entropy)


class TestRunExperiment:
    def test_cells_cached_on_rerun(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp")
        first, failures = xp.run_experiment(cfg)
        assert not failures
        assert all(not r.metadata["cached"] for r in first)
        second, _ = xp.run_experiment(cfg)
        assert all(r.metadata["cached"] for r in second)
        assert [metric_fields(a) for a in first] == [metric_fields(b) for b in second]

    def test_force_recomputes(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp")
        xp.run_experiment(cfg)
        again, _ = xp.run_experiment(cfg, force=True)
        assert all(not r.metadata["cached"] for r in again)

    def test_rerun_is_bit_identical(self, tmp_path):
        a, _ = xp.run_experiment(tiny_config(tmp_path / "a"))
        b, _ = xp.run_experiment(tiny_config(tmp_path / "b"))
        assert [metric_fields(r) for r in a] == [metric_fields(r) for r in b]

    def test_scratch_skips_pretraining(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp", methods=["scratch"])
        reports, failures = xp.run_experiment(cfg)
        assert not failures and len(reports) == 1
        assert not list((tmp_path / "xp" / "pretrain").glob("*.ckpt"))

    def test_dec_runs_lambda_zero_phase2(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp", methods=["dec"])
        reports, failures = xp.run_experiment(cfg)
        assert not failures
        assert (tmp_path / "xp" / "pretrain" / "phase2_lam0_s0.ckpt").exists()
        assert not (tmp_path / "xp" / "pretrain" / "phase2_lam0.1_s0.ckpt").exists()

    def test_digest_embedded_and_mismatch_detected(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp")
        reports, _ = xp.run_experiment(cfg)
        digest = xp.config_digest(cfg)
        assert all(r.metadata["config_digest"] == digest for r in reports)
        extra = read_checkpoint_extra(tmp_path / "xp" / "cells" / "cas_n4_s0" / "finetuned.ckpt")
        assert extra["digest"] == digest
        # changing the scientific config invalidates the cache
        changed = tiny_config(tmp_path / "xp")
        changed.finetune.epochs = 3
        assert xp.config_digest(changed) != digest
        rerun, _ = xp.run_experiment(changed)
        assert all(not r.metadata["cached"] for r in rerun)

    def test_coordinate_fields_do_not_change_digest(self, tmp_path):
        a = tiny_config(tmp_path / "a", seeds=[0])
        b = tiny_config(tmp_path / "b", seeds=[1, 2], methods=["dec"], few_shot_sizes=[6])
        assert xp.config_digest(a) == xp.config_digest(b)

    def test_failed_cell_recorded_others_proceed(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp", few_shot_sizes=[4, 999])
        reports, failures = xp.run_experiment(cfg)
        assert len(failures) == 2  # both methods at the impossible size
        assert len(reports) == 2
        assert (tmp_path / "xp" / "cells" / "cas_n999_s0" / "failure.json").exists()

    def test_validation(self, tmp_path):
        with pytest.raises(ValidationError, match="seeds"):
            xp.run_experiment(tiny_config(tmp_path / "xp", seeds=[]))
        with pytest.raises(ValidationError, match="methods"):
            xp.run_experiment(tiny_config(tmp_path / "xp", methods=["tile2vec"]))


class TestRunActive:
    def test_two_reports_per_cell(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp", seeds=[0, 1])
        reports, failures = xp.run_active(cfg, budgets=[2, 3])
        assert not failures
        assert len(reports) == 2 * 2 * 2
        arms = {(r.metadata["budget"], r.metadata["seed"], r.metadata["arm"]) for r in reports}
        assert len(arms) == 8

    def test_zero_budget_list_rejected(self, tmp_path):
        with pytest.raises(ValidationError, match="budget"):
            xp.run_active(tiny_config(tmp_path / "xp"), budgets=[])

    def test_budget_zero_flags_empty(self, tmp_path):
        reports, failures = xp.run_active(tiny_config(tmp_path / "xp"), budgets=[0])
        assert not failures
        assert all(r.metadata["empty_query_set"] for r in reports)

    def test_cached_and_deterministic(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp")
        first, _ = xp.run_active(cfg, budgets=[2])
        second, _ = xp.run_active(cfg, budgets=[2])
        assert all(r.metadata["cached"] for r in second)
        assert [metric_fields(r) for r in first] == [metric_fields(r) for r in second]
        assert (tmp_path / "xp" / "active" / "active_b2_s0" / "queries.json").exists()


class TestConfigRoundTrip:
    def test_dict_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp")
        clone = xp.ExperimentConfig.from_dict(cfg.to_dict())
        assert clone == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown"):
            xp.ExperimentConfig.from_dict({"learning_rate": 1.0})

    def test_defaults_fill_missing_sections(self):
        cfg = xp.ExperimentConfig.from_dict({"seeds": [7]})
        assert cfg.seeds == [7]
        assert cfg.network.depth == 3


class TestCli:
    def write_config(self, tmp_path):
        cfg = tiny_config(tmp_path / "xp")
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg.to_dict()))
        return path

    def test_synth_data_round_trip(self, tmp_path):
        out = tmp_path / "ds"
        rc = cli.main(
            ["synth-data", "--out", str(out), "--n-labeled", "3", "--n-unlabeled", "2",
             "--height", "16", "--width", "16", "--channels", "3", "--classes", "3", "--seed", "4"]
        )
        assert rc == 0
        ds = load_dataset(out)
        assert ds.n_labeled == 3 and ds.n_unlabeled == 2

    def test_print_config_digest(self, tmp_path, capsys):
        path = self.write_config(tmp_path)
        rc = cli.main(["experiment", "--config", str(path), "--print-config"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["config_digest"]
        assert payload["few_shot_sizes"] == [4]

    def test_experiment_and_report(self, tmp_path, capsys):
        path = self.write_config(tmp_path)
        rc = cli.main(["experiment", "--config", str(path), "--out", str(tmp_path / "xp")])
        assert rc == 0
        assert (tmp_path / "xp" / "reports.csv").exists()
        rc = cli.main(["report", "--out", str(tmp_path / "xp")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "cas" in out and "scratch" in out

    def test_cli_overrides(self, tmp_path):
        path = self.write_config(tmp_path)
        rc = cli.main(
            ["experiment", "--config", str(path), "--out", str(tmp_path / "xp"),
             "--method", "scratch", "--seed", "1", "--n", "3"]
        )
        assert rc == 0
        assert (tmp_path / "xp" / "cells" / "scratch_n3_s1" / "report.json").exists()
        assert not (tmp_path / "xp" / "cells" / "cas_n4_s0" / "report.json").exists()

    def test_failure_exit_code(self, tmp_path, capsys):
        path = self.write_config(tmp_path)
        rc = cli.main(["experiment", "--config", str(path), "--out", str(tmp_path / "xp"), "--n", "999"])
        assert rc == 1
        assert "failed" in capsys.readouterr().err

    def test_invalid_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"methods": ["nope"]}))
        assert cli.main(["experiment", "--config", str(bad)]) == 2

    def test_out_env_var(self, tmp_path, monkeypatch, capsys):
        payload = tiny_config(tmp_path / "ignored").to_dict()
        del payload["out_dir"]  # fall back to the environment default
        path = tmp_path / "config.json"
        path.write_text(json.dumps(payload))
        monkeypatch.setenv(cli.OUT_ENV_VAR, str(tmp_path / "envout"))
        rc = cli.main(["experiment", "--config", str(path)])
        assert rc == 0
        assert (tmp_path / "envout" / "reports.csv").exists()

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "casseg.cli", "synth-data", "--out", str(tmp_path / "ds"),
             "--n-labeled", "2", "--n-unlabeled", "1", "--height", "16", "--width", "16"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "ds" / "manifest.json").exists()
