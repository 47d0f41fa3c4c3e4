import csv
import json
from pathlib import Path

import pytest

from afdm_cpim.cli import (
    EXIT_BUDGET,
    EXIT_CONFIG,
    EXIT_FAILURE,
    EXIT_NUMERICAL,
    EXIT_OK,
    exit_code_for,
    main,
)
from afdm_cpim.config import DesignConfig, GasSolveConfig, load_config
from afdm_cpim.errors import BudgetExceededError, ConfigError, NumericalError, SimulationError
from afdm_cpim.settings import settings
from afdm_cpim.simulation import BER_COLUMNS, SimConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

NOISELESS_DEMO = [
    "N=4",
    "K=2",
    "P=2",
    "ell_max=1",
    "f_max=1.0",
    'codebook_source="explicit"',
    "codebook_indices=[1, 24]",
    "channel_n0=0.0",
    "filter_n0=1e-6",
    "ebn0_grid_db=[30.0]",
]


def _run(command: str, out: Path, *extra: str) -> int:
    return main([command, "--output-dir", str(out), "--log-level", "WARNING", *extra])


def _overrides(items: list[str]) -> list[str]:
    return [arg for item in items for arg in ("--override", item)]


def test_ber_sweep_writes_outputs(tmp_path: Path) -> None:
    assert _run("ber-sweep", tmp_path, "--config", str(CONFIGS / "minimal_sweep.toml")) == EXIT_OK
    with (tmp_path / "ber.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert list(rows[0]) == list(BER_COLUMNS)
    assert all(int(r["trials"]) == 100 for r in rows)
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["command"] == "ber-sweep"
    assert meta["config"]["N"] == 8
    codebook = json.loads((tmp_path / "codebook.json").read_text())
    assert codebook["K"] == 2
    assert codebook["q"] == meta["codebook"]
    assert not (tmp_path / "reference.csv").exists()


def test_ber_sweep_is_reproducible(tmp_path: Path) -> None:
    args = ("--config", str(CONFIGS / "minimal_sweep.toml"), *_overrides(["seed=7", "trials_per_point=40"]))
    assert _run("ber-sweep", tmp_path / "a", *args) == EXIT_OK
    assert _run("ber-sweep", tmp_path / "b", *args, "--jobs", "2") == EXIT_OK
    assert (tmp_path / "a" / "ber.csv").read_bytes() == (tmp_path / "b" / "ber.csv").read_bytes()
    assert json.loads((tmp_path / "a" / "metadata.json").read_text())["seed"] == 7


def test_invalid_field_reports_line(tmp_path: Path, capsys) -> None:
    config = tmp_path / "bad.toml"
    config.write_text('[system]\nN = "many"\nM = 2\n')
    assert _run("ber-sweep", tmp_path / "out", "--config", str(config)) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 2" in err
    assert "'N'" in err


@pytest.mark.parametrize(
    "extra",
    [
        ("--config", "does-not-exist.toml"),
        ("--override", "no_equals_sign"),
        ("--override", "M=3"),
        ("--override", "detector=quantum"),
    ],
)
def test_config_errors_exit_with_2(tmp_path: Path, extra: tuple[str, ...]) -> None:
    assert _run("ber-sweep", tmp_path, *extra) == EXIT_CONFIG


def test_unparseable_toml(tmp_path: Path) -> None:
    config = tmp_path / "broken.toml"
    config.write_text("N = = 4\n")
    assert _run("distance-grid", tmp_path / "out", "--config", str(config)) == EXIT_CONFIG


def test_full_ml_over_budget_exits_with_3(tmp_path: Path) -> None:
    assert _run("ber-sweep", tmp_path, "--override", "detector=full_ml") == EXIT_BUDGET


def test_exit_code_walks_the_cause_chain() -> None:
    try:
        try:
            raise NumericalError("singular", condition_number=1e18)
        except NumericalError as exc:
            raise SimulationError("trial 3 failed") from exc
    except SimulationError as wrapped:
        assert exit_code_for(wrapped) == EXIT_NUMERICAL
    assert exit_code_for(BudgetExceededError("too many")) == EXIT_BUDGET
    assert exit_code_for(ConfigError("bad")) == EXIT_CONFIG
    assert exit_code_for(RuntimeError("other")) == EXIT_FAILURE


def test_exhaustive_codebook_design(tmp_path: Path) -> None:
    args = ("--config", str(CONFIGS / "grid_n4.toml"), "--override", "method=exhaustive")
    assert _run("codebook-design", tmp_path, *args) == EXIT_OK
    lines = (tmp_path / "distances.csv").read_text().splitlines()
    assert len(lines) == 1 + 24 * 24
    codebook = json.loads((tmp_path / "codebook.json").read_text())
    assert codebook["K"] == 2
    assert codebook["metric"] == "angular"
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["method"] == "exhaustive"
    assert meta["selection"] == codebook["q"]
    assert codebook["d_min"] == meta["d_min"]
    assert "oracle_d_min" not in meta
    assert not (tmp_path / "trace.csv").exists()


def test_codebook_size_must_be_a_power_of_two(tmp_path: Path, capsys) -> None:
    args = ("--config", str(CONFIGS / "grid_n4.toml"), "--override", "K=3")
    assert _run("codebook-design", tmp_path, *args) == EXIT_CONFIG
    assert "power of two" in capsys.readouterr().err
    assert not (tmp_path / "distances.csv").exists()


def test_gas_over_emulation_budget_exits_with_3(tmp_path: Path) -> None:
    assert _run("ber-sweep", tmp_path, "--override", "detector=gas") == EXIT_BUDGET


def test_gas_codebook_design_matches_oracle(tmp_path: Path) -> None:
    args = ("--config", str(CONFIGS / "grid_n4.toml"), "--override", "pool_size=8")
    assert _run("codebook-design", tmp_path, *args) == EXIT_OK
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["method"] == "gas"
    assert meta["d_min"] == pytest.approx(meta["oracle_d_min"])
    assert (tmp_path / "trace.csv").exists()
    assert len((tmp_path / "distances.csv").read_text().splitlines()) == 1 + 8 * 8


def test_metrics_give_different_grids(tmp_path: Path) -> None:
    for metric in ("frobenius", "angular"):
        assert _run("distance-grid", tmp_path / metric, "--override", f"metric={metric}") == EXIT_OK
    frob = (tmp_path / "frobenius" / "distances.csv").read_text()
    ang = (tmp_path / "angular" / "distances.csv").read_text()
    assert frob != ang
    meta = json.loads((tmp_path / "angular" / "metadata.json").read_text())
    assert meta["command"] == "distance-grid"
    assert meta["pool"] == list(range(1, 25))


def test_gas_solve_on_terms_file(tmp_path: Path) -> None:
    config = str(CONFIGS / "gas_solve_terms.toml")
    assert _run("gas-solve", tmp_path / "a", "--config", config) == EXIT_OK
    solution = json.loads((tmp_path / "a" / "solution.json").read_text())
    assert solution["bits"] == [1, 0]
    assert solution["value"] == pytest.approx(-1.0)
    assert solution["exhaustive_bits"] == [1, 0]
    assert solution["oracle_queries"] > 0

    with (tmp_path / "a" / "trace.csv").open() as fh:
        ys = [float(r["y"]) for r in csv.DictReader(fh)]
    assert all(a >= b for a, b in zip(ys, ys[1:]))

    assert _run("gas-solve", tmp_path / "b", "--config", config) == EXIT_OK
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_gas_solve_needs_a_terms_file(tmp_path: Path) -> None:
    assert _run("gas-solve", tmp_path) == EXIT_CONFIG


def test_gas_solve_on_ml_instance(tmp_path: Path) -> None:
    assert _run("gas-solve", tmp_path, *_overrides(["objective=ml", "gas.max_iterations=500"])) == EXIT_OK
    solution = json.loads((tmp_path / "solution.json").read_text())
    assert len(solution["bits"]) == 4
    assert solution["transmitted_bits"] == solution["exhaustive_bits"]


def test_detect_demo_noiseless(tmp_path: Path, capsys) -> None:
    assert _run("detect-demo", tmp_path, *_overrides(NOISELESS_DEMO)) == EXIT_OK
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["agreements"]["full_ml"] is True
    assert meta["agreements"]["mmse_ml"] is True
    assert "gas" in meta["agreements"]
    report = (tmp_path / "report.txt").read_text()
    assert "k*:" in report
    assert "agrees_with_truth=True" in capsys.readouterr().out


def test_detect_demo_skips_oversized_detectors(tmp_path: Path) -> None:
    assert _run("detect-demo", tmp_path, *_overrides(["P=2", "ell_max=1"])) == EXIT_OK
    report = (tmp_path / "report.txt").read_text()
    assert "full_ml: skipped" in report
    assert "gas: skipped" in report
    assert set(json.loads((tmp_path / "metadata.json").read_text())["agreements"]) == {"mmse_ml"}


def test_default_output_dir_comes_from_settings(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(tmp_path))
    assert main(["distance-grid", "--log-level", "WARNING"]) == EXIT_OK
    assert (tmp_path / "distance-grid" / "distances.csv").exists()


@pytest.mark.parametrize(
    "name, model",
    [
        ("classical_n32.toml", SimConfig),
        ("cpim_k2_n32.toml", SimConfig),
        ("metric_angular_n8.toml", SimConfig),
        ("metric_frobenius_n8.toml", SimConfig),
        ("minimal_sweep.toml", SimConfig),
        ("grid_n4.toml", DesignConfig),
        ("gas_solve_terms.toml", GasSolveConfig),
    ],
)
def test_shipped_configs_validate(name: str, model) -> None:
    config = load_config(model, CONFIGS / name)
    assert config.seed >= 0
