import json

import polars as pl
import pytest

from hitting_filter.cli import EXIT_CONFIG, EXIT_OK, main

SMALL_OU = """
scenario = "ou-fig3"
N = 30
m = 5
M = 200
steps = 10
horizons = "1.5,2,3"
particles = 500
"""

SMALL_GBM = """
scenario = "gbm-fig1"
N = 30
m = 5
horizons = "1.5:0.5:3"
particles = 500
"""


@pytest.fixture
def ou_config(tmp_path):
    path = tmp_path / "ou.toml"
    path.write_text(SMALL_OU)
    return path


def _run(config, out, *extra):
    return main(["--config", str(config), "--out", str(out), "--seed", "7", *extra])


def test_run_writes_outputs(tmp_path, ou_config):
    out = tmp_path / "out"
    assert _run(ou_config, out) == EXIT_OK

    survival = pl.read_csv(out / "survival.csv")
    assert survival.columns == ["t_n", "survival_prob", "hitting_cdf", "std_err"]
    assert survival["t_n"].to_list() == [1.5, 2.0, 3.0]

    observations = pl.read_csv(out / "observations.csv")
    assert observations.columns == ["t_k", "y_k", "x_k"]
    assert observations.height == 6

    sidecar = json.loads((out / "survival.json").read_text())
    assert sidecar["config"]["seed"] == 7
    assert sidecar["config"]["preset"] == "ou"
    assert sidecar["meta"]["fbar"] == "monte_carlo"


def test_run_is_reproducible(tmp_path, ou_config):
    assert _run(ou_config, tmp_path / "first") == EXIT_OK
    assert _run(ou_config, tmp_path / "second") == EXIT_OK
    for name in ("survival.csv", "observations.csv"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_seed_changes_results(tmp_path, ou_config):
    assert _run(ou_config, tmp_path / "first") == EXIT_OK
    assert main(["--config", str(ou_config), "--out", str(tmp_path / "second"), "--seed", "8"]) == EXIT_OK
    first = (tmp_path / "first" / "observations.csv").read_bytes()
    assert first != (tmp_path / "second" / "observations.csv").read_bytes()


def test_warm_cache_gives_identical_results(tmp_path, ou_config):
    cache = tmp_path / "cache"
    assert _run(ou_config, tmp_path / "cold", "--cache", str(cache)) == EXIT_OK
    assert len(list(cache.glob("*.npz"))) == 1
    assert _run(ou_config, tmp_path / "warm", "--cache", str(cache)) == EXIT_OK
    cold = (tmp_path / "cold" / "survival.csv").read_bytes()
    assert cold == (tmp_path / "warm" / "survival.csv").read_bytes()


def test_validate_writes_comparison(tmp_path, ou_config, capsys):
    out = tmp_path / "out"
    assert _run(ou_config, out, "--validate") == EXIT_OK
    validation = pl.read_csv(out / "validation.csv")
    assert validation.columns == ["t_n", "filter", "oracle", "oracle_std_err", "abs_diff"]
    assert validation.height == 3
    assert "max |filter - oracle|" in capsys.readouterr().out


def test_delta_sweep(tmp_path, ou_config):
    out = tmp_path / "out"
    assert _run(ou_config, out, "--delta-sweep") == EXIT_OK
    for delta in (0.1, 0.3, 0.5):
        assert pl.read_csv(out / f"survival_delta_{delta}.csv").height == 3


def test_observations_file(tmp_path, ou_config):
    first = tmp_path / "first"
    assert _run(ou_config, first) == EXIT_OK
    second = tmp_path / "second"
    assert _run(ou_config, second, "--observations", str(first / "observations.csv")) == EXIT_OK
    assert not (second / "observations.csv").exists()
    original = pl.read_csv(first / "survival.csv")["survival_prob"].to_numpy()
    reloaded = pl.read_csv(second / "survival.csv")["survival_prob"].to_numpy()
    assert abs(original - reloaded).max() < 1e-9


def test_gbm_preset_uses_closed_form(tmp_path):
    config = tmp_path / "gbm.toml"
    config.write_text(SMALL_GBM)
    out = tmp_path / "out"
    assert _run(config, out, "--workers", "2") == EXIT_OK
    survival = pl.read_csv(out / "survival.csv")
    assert survival.height == 4
    assert survival["std_err"].to_list() == [0.0] * 4


@pytest.mark.parametrize(
    "argv",
    [
        ["--preset", "nope"],
        ["--preset", "ou", "--workers", "0"],
        ["--preset", "ou", "--observations", "/nonexistent/obs.csv"],
        ["--config", "/nonexistent/run.toml"],
    ],
)
def test_config_errors_exit_with_code(tmp_path, argv):
    assert main([*argv, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_mismatched_observations_exit_with_code(tmp_path, ou_config):
    path = tmp_path / "obs.csv"
    path.write_text("t_k,y_k\n0.0,0.35\n0.5,0.36\n")
    assert _run(ou_config, tmp_path / "out", "--observations", str(path)) == EXIT_CONFIG


def test_non_numeric_observations_exit_with_code(tmp_path, ou_config):
    path = tmp_path / "obs.csv"
    path.write_text("t_k,y_k\n0.0,0.35\n0.2,abc\n0.4,0.36\n0.6,0.34\n0.8,0.33\n1.0,0.35\n")
    assert _run(ou_config, tmp_path / "out", "--observations", str(path)) == EXIT_CONFIG
