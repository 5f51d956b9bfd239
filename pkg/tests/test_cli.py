import json

import numpy as np
import pytest

from mfglearn.cli import main
from mfglearn.config import config_from_dict
from mfglearn.errors import NumericalError
from mfglearn.io import RunDirectory, read_csv, write_csv


def _write(tmp_path, text):
    path = tmp_path / "c.toml"
    path.write_text(text)
    return str(path)


def test_csv_round_trip_is_exact(tmp_path, rng):
    cols = {"a": rng.normal(size=7), "b": rng.random(7) * 1e-300}
    write_csv(tmp_path / "x.csv", cols)
    back = read_csv(tmp_path / "x.csv")
    for k in cols:
        np.testing.assert_array_equal(back[k], cols[k])


def test_manifest_marks_failed_runs(tmp_path):
    cfg = config_from_dict({})
    with pytest.raises(NumericalError):
        with RunDirectory(tmp_path / "run", "x", cfg, 3) as run:
            run.csv("partial.csv", {"a": [1.0]})
            raise NumericalError("boom")
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["outputs"] == ["partial.csv"]
    assert "boom" in manifest["error"]
    assert manifest["config_hash"] == cfg.hash()


def test_stationary_run_writes_manifest(tmp_path):
    out = tmp_path / "out"
    code = main(["stationary", "--config", _write(tmp_path, "[grid]\nn_a = 60\n"), "--out-dir", str(out), "--seed", "5"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["seed"] == 5
    assert "prices.csv" in manifest["outputs"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["clearing_residual_max"] < 1e-6


def test_bad_config_exits_2(tmp_path, capsys):
    code = main(["stationary", "--config", _write(tmp_path, "[model]\nnu = -1.0\n"), "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "model.nu" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["stationary", "--config", str(tmp_path / "none.toml"), "--out-dir", str(tmp_path / "o")]) == 2


def test_unknown_subcommand_is_rejected():
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_common_noise_flags_override(tmp_path):
    out = tmp_path / "cn"
    text = "[grid]\nn_a = 60\n[common_noise]\nn_steps = 3\nz_nodes = 5\np_nodes = 7\n"
    code = main(["common-noise", "--config", _write(tmp_path, text), "--out-dir", str(out), "--beta", "0", "--gain", "0.3"])
    assert code == 0
    saved = (out / "config.toml").read_text()
    assert "gain = 0.3" in saved and "beta = 0.0" in saved
    z = read_csv(out / "z_path.csv")
    np.testing.assert_array_equal(list(z.values())[-1], 0.0)
