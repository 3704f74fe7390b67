import csv
import json

import numpy as np
import pytest

from ebmkit import cli


def toy_config(out_dir, mode="ce", epochs=3, n=50, extra=None):
    config = {
        "seed": 7,
        "out_dir": str(out_dir),
        "model": {"kind": "mlp", "input_dim": 2, "hidden": [16], "classes": 2},
        "data": {"kind": "gaussian_mixture", "n_per_class": n,
                 "centers": [[-0.5, 0.0], [0.5, 0.0]], "std": 0.15, "seed": 3},
        "train": {"mode": mode, "epochs": epochs, "batch_size": 25, "lr": 0.01},
    }
    if extra:
        config.update(extra)
    return config


def write_config(tmp_path, config, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One CE toy run shared by the read-only commands."""
    out = tmp_path_factory.mktemp("trained")
    config = toy_config(out, epochs=10)
    path = out / "config.json"
    path.write_text(json.dumps(config))
    assert cli.main(["train", "--config", str(path)]) == 0
    return out, path


class TestTrain:
    def test_smoke_writes_artifacts(self, tmp_path):
        config_path = write_config(tmp_path, toy_config(tmp_path / "run"))
        assert cli.main(["train", "--config", str(config_path)]) == 0
        out = tmp_path / "run"
        assert (out / "checkpoint_final.npz").exists()
        assert (out / "runlog.csv").exists()
        manifest = json.loads((out / "manifest_train.json").read_text())
        assert manifest["seed"] == 7
        assert "checkpoint_sha256" in manifest

    def test_invalid_mode_exits_one(self, tmp_path, capsys):
        config = toy_config(tmp_path / "run", mode="bogus")
        config_path = write_config(tmp_path, config)
        assert cli.main(["train", "--config", str(config_path)]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        config = toy_config(tmp_path / "run")
        config["trian"] = {}
        config_path = write_config(tmp_path, config)
        assert cli.main(["train", "--config", str(config_path)]) == 1
        assert "trian" in capsys.readouterr().err

    def test_rerun_reproduces_runlog(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        path_a = write_config(tmp_path, toy_config(out_a), "a.json")
        path_b = write_config(tmp_path, toy_config(out_b), "b.json")
        assert cli.main(["train", "--config", str(path_a)]) == 0
        assert cli.main(["train", "--config", str(path_b)]) == 0
        assert (out_a / "runlog.csv").read_text() == (out_b / "runlog.csv").read_text()

    def test_missing_config_flag_exits_one(self):
        assert cli.main(["train"]) == 1


class TestEvalAndCalibrate:
    def test_eval_writes_csv(self, trained, tmp_path):
        out, config_path = trained
        eval_out = tmp_path / "eval"
        code = cli.main(["eval", "--config", str(config_path),
                         "--checkpoint", str(out / "checkpoint_final.npz"),
                         "--out", str(eval_out)])
        assert code == 0
        header, row = (eval_out / "eval.csv").read_text().strip().splitlines()
        assert header == "accuracy,mean_confidence,ece"
        accuracy = float(row.split(",")[0])
        assert accuracy >= 0.9

    def test_calibrate_bins_parse(self, trained, tmp_path):
        out, config_path = trained
        cal_out = tmp_path / "cal"
        code = cli.main(["calibrate", "--config", str(config_path),
                         "--checkpoint", str(out / "checkpoint_final.npz"),
                         "--out", str(cal_out)])
        assert code == 0
        with open(cal_out / "calibration_bins.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 20
        assert sum(int(r["count"]) for r in rows) == 100  # 2 classes x 50

    def test_missing_checkpoint_exits_one(self, trained, tmp_path):
        _, config_path = trained
        assert cli.main(["eval", "--config", str(config_path),
                         "--out", str(tmp_path / "x")]) == 1

    def test_unreadable_checkpoint_exits_two(self, trained, tmp_path):
        _, config_path = trained
        bogus = tmp_path / "not_a_checkpoint.npz"
        bogus.write_bytes(b"garbage")
        assert cli.main(["eval", "--config", str(config_path),
                         "--checkpoint", str(bogus),
                         "--out", str(tmp_path / "y")]) == 2


class TestOod:
    def test_in_equals_out_gives_half(self, trained, tmp_path, capsys):
        out, config_path = trained
        config = json.loads(config_path.read_text())
        config["ood_data"] = dict(config["data"])  # identical distribution & seed
        path = write_config(tmp_path, config, "ood.json")
        ood_out = tmp_path / "ood"
        code = cli.main(["ood", "--config", str(path),
                         "--checkpoint", str(out / "checkpoint_final.npz"),
                         "--out", str(ood_out), "--score", "log_px"])
        assert code == 0
        with open(ood_out / "ood_auroc.csv") as fh:
            row = list(csv.DictReader(fh))[0]
        assert abs(float(row["auroc"]) - 0.5) <= 0.02

    def test_emits_both_score_columns(self, trained, tmp_path):
        out, config_path = trained
        config = json.loads(config_path.read_text())
        config["ood_data"] = {"kind": "gaussian_mixture", "n_per_class": 30,
                              "centers": [[0.0, 0.9]], "std": 0.05, "seed": 11}
        path = write_config(tmp_path, config, "ood2.json")
        ood_out = tmp_path / "ood2"
        code = cli.main(["ood", "--config", str(path),
                         "--checkpoint", str(out / "checkpoint_final.npz"),
                         "--out", str(ood_out)])
        assert code == 0
        with open(ood_out / "ood_scores.csv") as fh:
            rows = list(csv.DictReader(fh))
        splits = {r["split"] for r in rows}
        assert splits == {"in", "out"}
        assert (ood_out / "ood_hist_in.csv").exists()
        assert (ood_out / "ood_hist_out.csv").exists()


class TestAttack:
    def test_epsilon_zero_matches_clean(self, trained, tmp_path):
        out, config_path = trained
        attack_out = tmp_path / "atk"
        code = cli.main(["attack", "--config", str(config_path),
                         "--checkpoint", str(out / "checkpoint_final.npz"),
                         "--out", str(attack_out),
                         "--norm", "l2", "--epsilons", "0.0"])
        assert code == 0
        with open(attack_out / "attack.csv") as fh:
            row = list(csv.DictReader(fh))[0]
        assert row["clean_accuracy"] == row["adversarial_accuracy"]


class TestHistEgm:
    def test_density_integrates_to_one(self, trained, tmp_path):
        out, config_path = trained
        hist_out = tmp_path / "hist"
        code = cli.main(["hist-egm", "--config", str(config_path),
                         "--checkpoint", str(out / "checkpoint_final.npz"),
                         "--out", str(hist_out)])
        assert code == 0
        with open(hist_out / "egm_hist.csv") as fh:
            rows = list(csv.DictReader(fh))
        total = sum(float(r["density"]) * (float(r["bin_upper"]) - float(r["bin_lower"]))
                    for r in rows)
        assert total == pytest.approx(1.0, abs=1e-9)


class TestSample:
    def sample_config(self, out_dir, kind, n_steps=30, bound=None):
        sampler = {"n_steps": n_steps, "step_size": 1.0, "noise": False}
        if bound is not None:
            sampler["divergence_bound"] = bound
        return {
            "seed": 1,
            "out_dir": str(out_dir),
            "model": {"kind": kind, "dim": 2},
            "sample": {"n": 16, "sampler": sampler},
        }

    def test_quadratic_energy_converges(self, tmp_path):
        out = tmp_path / "quad"
        path = write_config(tmp_path, self.sample_config(out, "quadratic_bowl"))
        assert cli.main(["sample", "--config", str(path)]) == 0
        stats = json.loads((out / "divergence.json").read_text())
        assert stats["converged"] is True
        assert stats["n_diverged"] == 0

    def test_concave_energy_reports_divergence(self, tmp_path):
        out = tmp_path / "concave"
        path = write_config(tmp_path, self.sample_config(out, "concave_bowl", bound=5.0))
        assert cli.main(["sample", "--config", str(path)]) == 0
        stats = json.loads((out / "divergence.json").read_text())
        assert stats["n_diverged"] == 16
        assert stats["reason"] == "bound-exceeded"

    def test_row_count_is_n_minus_diverged(self, tmp_path):
        out = tmp_path / "rows"
        path = write_config(tmp_path, self.sample_config(out, "quadratic_bowl"))
        assert cli.main(["sample", "--config", str(path)]) == 0
        stats = json.loads((out / "divergence.json").read_text())
        lines = (out / "samples.csv").read_text().strip().splitlines()
        assert len(lines) - 1 == 16 - stats["n_diverged"]
