import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdro import io as fio
from evdro.cli import EXIT_INVALID, EXIT_OK, EXIT_SOLVER, main
from evdro.simulator import make_scenario

SMALL = ["--regions", "3", "--fleet", "30", "--intervals-per-day", "6", "--days", "3"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--seed", "6", "--out", str(d)] + SMALL) == EXIT_OK
    return d


def small_config(tmp_path, data_dir, **kw):
    cfg = {"data_dir": str(data_dir), "out": str(tmp_path / "out"), "demand_predictor": "persistence",
           "supply_predictor": "persistence", "episodes": 1, "warmup_days": 2,
           "bootstrap": {"outer": 2, "inner": 6, "studentize": 5, "resample_size": 10}, **kw}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


# -- files -----------------------------------------------------------------------

def test_scenario_round_trip(tmp_path):
    sc = make_scenario(4, seed=1, fleet_size=40, n_intervals_per_day=6)
    fio.write_scenario(tmp_path, sc)
    back = fio.read_scenario(tmp_path)
    assert back.city.charging_regions == sc.city.charging_regions
    assert np.array_equal(back.city.vacant_cost, sc.city.vacant_cost)
    for key in fio.KERNEL_KEYS:
        assert np.array_equal(getattr(back.kernel, key), getattr(sc.kernel, key))
    assert np.array_equal(back.demand_mean, sc.demand_mean) and np.array_equal(back.ports, sc.ports)
    assert np.array_equal(back.initial_vacant, sc.initial_vacant)
    assert back.city.fairness_power == sc.city.fairness_power and back.seed == sc.seed


@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1))
def test_history_and_decision_round_trip(tmp_path_factory, seed):
    d = tmp_path_factory.mktemp("rt")
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 50, size=(rng.integers(1, 8), 3))
    fio.write_history(d / "h.csv", counts)
    assert np.array_equal(fio.read_history(d / "h.csv"), counts)
    X = rng.exponential(size=(3, 3)) * (rng.random((3, 3)) < 0.5)
    Y = rng.exponential(size=(3, 3)) * (rng.random((3, 3)) < 0.5)
    fio.write_decision(d / "x.csv", X, Y, k=2)
    got = fio.read_decision(d / "x.csv", 3)
    if X.any() or Y.any():
        assert np.array_equal(got[2][0], X) and np.array_equal(got[2][1], Y)


def test_files_carry_schema_line_and_reject_fractional_counts(tmp_path):
    fio.write_history(tmp_path / "h.csv", [[1, 2]])
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "# schema=1"
    with pytest.raises(fio.ConfigError):
        fio.write_history(tmp_path / "bad.csv", [[1.5, 2]])
    (tmp_path / "nohead.csv").write_text("time,region,count\n0,0,1\n")
    with pytest.raises(fio.ConfigError):
        fio.read_history(tmp_path / "nohead.csv")


def test_single_region_has_identity_kernel(tmp_path):
    fio.gen_data(tmp_path, 0, n_regions=1, fleet_size=10, n_intervals_per_day=4, days=2)
    k = fio.read_kernel(tmp_path / "kernel.json")
    assert np.all(k.P_v == 1.0) and np.all(k.Q_v == 1.0)
    assert k.row_sum_error() <= 1e-12
    assert fio.read_history(tmp_path / "history_demand.csv").shape[1] == 1


def test_gen_data_is_byte_identical(tmp_path, data_dir):
    assert main(["gen-data", "--seed", "6", "--out", str(tmp_path)] + SMALL) == EXIT_OK
    for name in ("regions.csv", "costs.csv", "kernel.json", "scenario.json", "history_demand.csv",
                 "history_supply.csv", "config.json"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()
    assert fio.read_kernel(tmp_path / "kernel.json").row_sum_error() <= 1e-9


def test_config_validation(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
    with pytest.raises(fio.ConfigError):
        fio.load_config(tmp_path / "c.json")
    with pytest.raises(fio.ConfigError):
        fio.RunConfig(alpha=1.5).validate()
    with pytest.raises(fio.ConfigError):
        fio.RunConfig(mode="robustest").validate()


# -- command line ------------------------------------------------------------------

def test_exit_codes(tmp_path, data_dir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--no-such-flag"])
    assert exc.value.code == EXIT_INVALID
    assert "usage" in capsys.readouterr().err
    assert main(["fit", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["solve", "--data", str(data_dir), "--out", str(tmp_path), "--alpha", "2"]) == EXIT_INVALID
    # an unreachable charging floor is caught while building the program
    cfg = small_config(tmp_path, data_dir, t_floor=1e6)
    assert main(["solve", "--config", str(cfg)]) == EXIT_INVALID
    # an unattainable tolerance exhausts the iteration budget
    cfg = small_config(tmp_path, data_dir)
    assert main(["solve", "--config", str(cfg), "--tol", "1e-300"]) == EXIT_SOLVER


def test_fit_writes_mse_table(tmp_path, data_dir):
    cfg = small_config(tmp_path, data_dir)
    assert main(["fit", "--config", str(cfg), "--predictors", "persistence", "ar(1)"]) == EXIT_OK
    text = (tmp_path / "out" / "mse_table.csv").read_text().splitlines()
    assert text[0] == "# schema=1" and len(text) == 2 + 4
    best = json.loads((tmp_path / "out" / "best_predictors.json").read_text())
    assert set(best) == {"demand", "supply"}


def test_uncertainty_on_zero_noise_data(tmp_path, data_dir):
    flat = tmp_path / "flat"
    flat.mkdir()
    for name in ("regions.csv", "costs.csv", "kernel.json", "scenario.json"):
        (flat / name).write_bytes((data_dir / name).read_bytes())
    fio.write_history(flat / "history_demand.csv", np.tile([5, 7, 9], (40, 1)))
    fio.write_history(flat / "history_supply.csv", np.tile([3, 2, 4], (40, 1)))
    cfg = small_config(tmp_path, flat)
    assert main(["uncertainty", "--config", str(cfg)]) == EXIT_OK
    for role in ("demand", "supply"):
        rep = json.loads((tmp_path / "out" / f"uncertainty_{role}.json").read_text())
        assert rep["omega_hat"] <= 1e-6


def test_non_robust_and_zero_radius_decisions_match(tmp_path, data_dir):
    cfg = small_config(tmp_path, data_dir)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--config", str(cfg), "--mode", "non-robust", "--out", str(a)]) == EXIT_OK
    assert main(["solve", "--config", str(cfg), "--mode", "counterpart", "--omega", "0", "--gamma", "1",
                 "--out", str(b)]) == EXIT_OK
    assert (a / "decision.csv").read_bytes() == (b / "decision.csv").read_bytes()
    assert json.loads((b / "solution.json").read_text())["status"] == "optimal"


def test_simulate_then_report(tmp_path, data_dir):
    cfg = small_config(tmp_path, data_dir)
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--mode", "non-robust", "--no-timing"]) == EXIT_OK
    assert main(["simulate", "--config", str(cfg), "--mode", "counterpart", "--no-timing"]) == EXIT_OK
    logs = sorted(out.glob("log_*.csv"))
    assert len(logs) == 2
    assert main(["report", "--config", str(cfg)] + [str(p) for p in logs]) == EXIT_OK
    md = (out / "report.md").read_text()
    assert "| policy |" in md and "pct_daily_cost" in md and "pct_M_m" in md
    assert main(["report", "--config", str(cfg), str(logs[0])]) == EXIT_INVALID
