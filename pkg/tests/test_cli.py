import json

import numpy as np
import pytest

from robustcs import cli

TINY = {
    "schema_version": 1,
    "scenario": {"N": 32, "m": 16, "jumps_min": 2, "jumps_max": 3, "min_gap": 3},
    "methods": ["tikhonov"],
    "noise_kinds": ["adversarial", "gaussian"],
    "eta_grid": [0.02, 0.05],
    "draws": 2,
    "n_signals": 2,
    "train": {"size": 8, "epochs": 1},
    "attack": {"steps": 8, "restarts": 2, "polish_steps": 5},
    "admm": {"max_iters": 800, "tol_primal": 1e-6, "tol_dual": 1e-6, "unroll_iters": 8},
}


@pytest.fixture
def config_path(tmp_path):
    cfg = dict(TINY)
    cfg["out"] = str(tmp_path / "results")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_curve_command(config_path, capsys, tmp_path):
    rc = cli.main(["--config", str(config_path), "curve"])
    assert rc == 0
    assert (tmp_path / "results" / "curves.csv").exists()
    assert (tmp_path / "results" / "records.csv").exists()


def test_gen_data_command(config_path, tmp_path):
    rc = cli.main(["--config", str(config_path), "gen-data"])
    assert rc == 0
    assert (tmp_path / "results" / "operator.rxc").exists()
    assert (tmp_path / "results" / "test_data.rxc").exists()


def test_attack_then_transfer(config_path, tmp_path, capsys):
    rc = cli.main(["--config", str(config_path), "attack"])
    assert rc == 0
    perts = sorted((tmp_path / "results" / "perturbations").glob("*.rxc"))
    assert perts
    capsys.readouterr()  # drain the attack command's output
    rc = cli.main([
        "--config", str(config_path), "transfer",
        "--perturbation", str(perts[0]), "--method", "tikhonov",
    ])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["target_method"] == "tikhonov"


def test_train_command_without_learnable_methods(config_path, capsys):
    rc = cli.main(["--config", str(config_path), "train"])
    assert rc == 0
    assert "nothing to train" in capsys.readouterr().out


def test_bad_config_is_reported(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema_version": 1, "wat": 1}))
    rc = cli.main(["--config", str(path), "curve"])
    assert rc == 2
    assert "wat" in capsys.readouterr().err


def test_seed_and_out_overrides(config_path, tmp_path):
    rc = cli.main(["--config", str(config_path), "--seed", "5",
                   "--out", str(tmp_path / "other"), "curve"])
    assert rc == 0
    assert (tmp_path / "other" / "curves.csv").exists()
