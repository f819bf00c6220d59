import json
from pathlib import Path

import pytest
import yaml

from heavybrw.cli import ReproError, main, repro_check, run_config
from heavybrw.spectral import band_of
from heavybrw.config import ConfigError, from_dict, load_config, parse_config, tune_law

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small_sim(seed=5, workers=1):
    return from_dict({
        "scenario": "simulate",
        "kernel": {"d": 1, "alpha": 1.0},
        "law": {"b": {0: 1.0, 2: 1.0}},
        "params": {"times": [1.0, 2.0], "trials": 2000, "seed": seed, "workers": workers},
    })


# --- config parsing


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.yaml")):
        cfg = load_config(path)
        assert cfg.scenario in ("spectral", "moments", "simulate", "verify")


def test_bad_alpha_names_field_and_line():
    text = "scenario: spectral\nkernel:\n  d: 1\n  alpha: 2.5\n"
    with pytest.raises(ConfigError) as ei:
        parse_config(text, "bad.yaml")
    msg = str(ei.value)
    assert "kernel.alpha" in msg and "line 4" in msg and ei.value.line == 4


@pytest.mark.parametrize("raw,field", [
    ({"scenario": "nope"}, "scenario"),
    ({"scenario": "spectral", "kernel": {"d": 4, "alpha": 1.0}}, "kernel.d"),
    ({"scenario": "spectral", "kernel": {"d": 1, "alpha": 1.0}, "law": {"b": {1: 1.0}}}, "law.b"),
    ({"scenario": "simulate", "kernel": {"d": 1, "alpha": 1.0}, "params": {"times": [1.0], "trials": 10}}, "params.seed"),
    ({"scenario": "moments", "kernel": {"d": 1, "alpha": 1.0}, "params": {"tmax": 3}}, "params.tmax"),
])
def test_config_errors(raw, field):
    with pytest.raises(ConfigError) as ei:
        from_dict(raw)
    assert field in str(ei.value)


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigError) as ei:
        parse_config("scenario: spectral\nkernel: [1,\n", "x.yaml")
    assert ei.value.line is not None


def test_tune_law():
    b = tune_law({0: 1.0, 2: 1.0}, 0.5, 2)
    assert b[0] == 1.0 and b[2] == pytest.approx(1.5)
    b = tune_law({0: 1.0, 3: 1.0}, 2.0, 3)
    assert 2 * b[3] - b[0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        tune_law({3: 1.0}, 0.5, 2)


def test_config_hash_ignores_seed_and_workers():
    a, b, c = small_sim(5, 1), small_sim(6, 8), small_sim(5, 1)
    assert a.config_hash() == b.config_hash() == c.config_hash()
    d = a.with_overrides({"params.trials": 3000})
    assert d.config_hash() != a.config_hash()


# --- runs and sidecars


def test_run_spectral_beta_zero(tmp_path):
    cfg = from_dict({"scenario": "spectral", "kernel": {"d": 1, "alpha": 0.5},
                     "params": {"lambdas": [0.0, 0.5], "x": [0, 2]}})
    code, side = run_config(cfg, tmp_path, "s")
    assert code == 0
    meta = json.loads(side.read_text())
    assert meta["beta"] == 0 and set(meta["outputs"]) == {"s.green.csv", "s.classify.csv"}
    lines = (tmp_path / "s.green.csv").read_text().splitlines()
    assert lines[0] == "#schema=green.v1"
    assert lines[1] == "lambda,x,y,value,quad_error,status"
    assert len(lines) == 2 + 4


def test_cli_verify_critical(tmp_path, capsys):
    code = main(["run", str(CONFIGS / "verify_critical.yaml"), "--out", str(tmp_path)])
    assert code == 0
    assert "PASS" in capsys.readouterr().out
    header = (tmp_path / "verify_critical.verify.csv").read_text().splitlines()[:2]
    assert header[0] == "#schema=verify.v1" and header[1].startswith("quantity,n,form")


def test_cli_bad_config_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario: spectral\nkernel:\n  d: 1\n  alpha: 2.5\n")
    assert main(["run", str(bad), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "kernel.alpha" in err and "line 4" in err


def test_cli_moments_solve(tmp_path):
    code = main(["moments", "solve", "--d", "1", "--alpha", "1.5", "--b", "0:1", "--beta-ratio", "0.5",
                 "--t-max", "5", "--step", "0.1", "--out", str(tmp_path)])
    assert code == 0
    text = next(tmp_path.glob("*.moments.csv")).read_text().splitlines()
    assert text[0] == "#schema=moments.v1"


def test_cli_kernel_inspect(capsys):
    assert main(["kernel", "inspect", "--d", "1", "--alpha", "1.0"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["ratio"] == 1.0 and info["band"] == band_of(1.0)
    assert abs(info["row_sum_residual"]) < 1e-12
    assert main(["kernel", "inspect", "--d", "1", "--alpha", "3.0"]) == 1


def test_repro_same_seed_other_workers(tmp_path):
    _, a = run_config(small_sim(5, 1), tmp_path / "a", "sim")
    _, b = run_config(small_sim(5, 3), tmp_path / "b", "sim")
    _, c = run_config(small_sim(6, 1), tmp_path / "c", "sim")
    assert repro_check(a, b)
    assert not repro_check(a, c)
    assert main(["repro", "check", str(a), str(b)]) == 0
    assert main(["repro", "check", str(a), str(c)]) == 2


def test_repro_deterministic_scenario(tmp_path):
    cfg = load_config(CONFIGS / "spectral.yaml")
    _, a = run_config(cfg, tmp_path / "a")
    _, b = run_config(cfg, tmp_path / "b")
    assert repro_check(a, b)


def test_repro_rejects_different_configs(tmp_path):
    _, a = run_config(small_sim(5, 1), tmp_path / "a", "sim")
    _, b = run_config(small_sim(5, 1).with_overrides({"params.trials": 1000}), tmp_path / "b", "sim")
    with pytest.raises(ReproError):
        repro_check(a, b)


def test_sidecar_round_trip(tmp_path):
    cfg = small_sim(9, 1)
    _, side = run_config(cfg, tmp_path, "sim")
    meta = json.loads(side.read_text())
    assert meta["seeds"] == [9] and meta["config_hash"] == cfg.config_hash()
    again = from_dict(meta["config"])
    assert again.config_hash() == cfg.config_hash()
    assert yaml.safe_load(yaml.safe_dump(meta["config"])) == meta["config"]
