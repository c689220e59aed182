"""File formats, run configuration and synthetic data generation.

Tables are CSV with a leading ``# schema=1`` comment; structured objects are
JSON. A data directory written by :func:`gen_data` holds

* ``regions.csv``: region_id, has_station, ports
* ``costs.csv``: origin, dest, vacant_cost, lowbatt_cost (``inf`` = forbidden)
* ``kernel.json``: the five (K, N, N) transition stacks
* ``history_demand.csv`` / ``history_supply.csv``: time, region, count
* ``scenario.json``: demand law, initial fleet and the city scalars
* ``config.json``: a :class:`RunConfig` pointing at the directory
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .model import FORBIDDEN, CityModel, ModelError, TransitionKernel
from .reformulation import normalize_mode
from .simulator import SCHEMA_LINE, ScenarioConfig, make_scenario, warm_up
from .uncertainty import BootstrapConfig

KERNEL_KEYS = ("P_v", "P_o", "P_l", "Q_v", "Q_o")
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# csv helpers

def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    buf.write(SCHEMA_LINE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != SCHEMA_LINE:
            raise ConfigError(f"{path}: expected '{SCHEMA_LINE}' header, got {first!r}")
        return list(csv.DictReader(fh))


def _fmt(x: float) -> str:
    if not math.isfinite(x) or x >= FORBIDDEN:
        return "inf"
    return repr(float(x))


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# individual files

def write_regions(path, city: CityModel, ports) -> None:
    rows = [[i, int(city.sigma_mask[i]), int(ports[i])] for i in range(city.n_regions)]
    _write_csv(path, ("region_id", "has_station", "ports"), rows)


def read_regions(path):
    """Return (charging region tuple, ports array)."""
    rows = _read_csv(path)
    ids = [int(r["region_id"]) for r in rows]
    if ids != list(range(len(ids))):
        raise ConfigError(f"{path}: region ids must be 0..N-1 in order")
    sigma = tuple(i for i, r in zip(ids, rows) if int(r["has_station"]))
    ports = np.array([int(r["ports"]) for r in rows], dtype=int)
    return sigma, ports


def write_costs(path, city: CityModel) -> None:
    N = city.n_regions
    rows = [[i, j, _fmt(city.vacant_cost[i, j]), _fmt(city.lowbatt_cost[i, j])]
            for i in range(N) for j in range(N)]
    _write_csv(path, ("origin", "dest", "vacant_cost", "lowbatt_cost"), rows)


def read_costs(path, n_regions: int):
    rows = _read_csv(path)
    W = np.zeros((n_regions, n_regions))
    Ws = np.zeros((n_regions, n_regions))
    seen = np.zeros((n_regions, n_regions), dtype=bool)
    for r in rows:
        i, j = int(r["origin"]), int(r["dest"])
        W[i, j] = float(r["vacant_cost"])
        Ws[i, j] = float(r["lowbatt_cost"])
        seen[i, j] = True
    if not seen.all():
        raise ConfigError(f"{path}: cost table must list every (origin, dest) pair")
    return W, Ws


def write_kernel(path, kernel: TransitionKernel) -> None:
    data = {"schema": SCHEMA_VERSION, "n_periods": kernel.n_periods, "n_regions": kernel.n_regions}
    for key in KERNEL_KEYS:
        data[key] = getattr(kernel, key).tolist()
    _write_json(path, data)


def read_kernel(path, validate: bool = True) -> TransitionKernel:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported kernel schema {data.get('schema')!r}")
    kernel = TransitionKernel(*(np.asarray(data[k], dtype=float) for k in KERNEL_KEYS))
    if validate:
        kernel.validate()
    return kernel


def write_history(path, counts) -> None:
    counts = np.asarray(counts)
    if np.any(counts != np.rint(counts)):
        raise ConfigError("history counts must be whole numbers")
    rows = [[t, i, int(counts[t, i])] for t in range(counts.shape[0]) for i in range(counts.shape[1])]
    _write_csv(path, ("time", "region", "count"), rows)


def read_history(path) -> np.ndarray:
    rows = _read_csv(path)
    if not rows:
        raise ConfigError(f"{path}: empty history")
    t = np.array([int(r["time"]) for r in rows])
    i = np.array([int(r["region"]) for r in rows])
    out = np.zeros((t.max() + 1, i.max() + 1), dtype=int)
    out[t, i] = [int(r["count"]) for r in rows]
    return out


def write_decision(path, X, Y, k: int = 0) -> None:
    """Real-valued dispatch for one interval as (kind, origin, dest, amount) rows."""
    rows = []
    for kind, M in (("vacant", X), ("lowbatt", Y)):
        for i, j in zip(*np.nonzero(np.asarray(M))):
            rows.append([k, kind, int(i), int(j), repr(float(M[i, j]))])
    _write_csv(path, ("interval", "kind", "origin", "dest", "amount"), rows)


def read_decision(path, n_regions: int):
    out = {}
    for r in _read_csv(path):
        k = int(r["interval"])
        X, Y = out.setdefault(k, (np.zeros((n_regions, n_regions)), np.zeros((n_regions, n_regions))))
        (X if r["kind"] == "vacant" else Y)[int(r["origin"]), int(r["dest"])] = float(r["amount"])
    return out


# ---------------------------------------------------------------------------
# scenario directory

_CITY_SCALARS = ("horizon", "move_limit_vacant", "move_limit_lowbatt", "charge_weight", "fairness_weight",
                 "fairness_power", "t_floor", "n_intervals_per_day")


def write_scenario(directory, scenario: ScenarioConfig) -> None:
    d = Path(directory)
    city = scenario.city
    write_regions(d / "regions.csv", city, scenario.ports)
    write_costs(d / "costs.csv", city)
    write_kernel(d / "kernel.json", scenario.kernel)
    _write_json(d / "scenario.json", {
        "schema": SCHEMA_VERSION,
        "city": {k: getattr(city, k) for k in _CITY_SCALARS},
        "demand_mean": scenario.demand_mean.tolist(),
        "demand_sd": scenario.demand_sd.tolist(),
        "duration_probs": scenario.duration_probs.tolist(),
        "initial_vacant": scenario.initial_vacant.tolist(),
        "initial_occupied": scenario.initial_occupied.tolist(),
        "initial_lowbatt": scenario.initial_lowbatt.tolist(),
        "demand_law": scenario.demand_law,
        "episode_length": scenario.episode_length,
        "seed": scenario.seed,
    })


def read_scenario(directory) -> ScenarioConfig:
    d = Path(directory)
    for name in ("regions.csv", "costs.csv", "kernel.json", "scenario.json"):
        if not (d / name).is_file():
            raise ConfigError(f"missing {d / name}")
    meta = json.loads((d / "scenario.json").read_text())
    if meta.get("schema") != SCHEMA_VERSION:
        raise ConfigError("unsupported scenario schema")
    sigma, ports = read_regions(d / "regions.csv")
    W, Ws = read_costs(d / "costs.csv", ports.size)
    city = CityModel(n_regions=ports.size, charging_regions=sigma, vacant_cost=W, lowbatt_cost=Ws, **meta["city"])
    kernel = read_kernel(d / "kernel.json")
    return ScenarioConfig(city=city, kernel=kernel, demand_mean=np.asarray(meta["demand_mean"]),
                          demand_sd=np.asarray(meta["demand_sd"]), ports=ports,
                          duration_probs=np.asarray(meta["duration_probs"]),
                          initial_vacant=meta["initial_vacant"], initial_occupied=meta["initial_occupied"],
                          initial_lowbatt=meta["initial_lowbatt"], demand_law=meta["demand_law"],
                          episode_length=int(meta["episode_length"]), seed=int(meta["seed"]))


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    data_dir: str = "data"
    out: str = "out"
    seed: int = 0
    mode: str = "counterpart"
    alpha: float = 0.25
    eta: float = 0.1
    tol: float = 1e-6
    sim_tol: float = 1e-4
    theta: Optional[float] = None
    beta: Optional[float] = None
    a: Optional[float] = None
    t_floor: Optional[float] = None
    demand_predictor: str = "ar(1)"
    supply_predictor: str = "ar(1)"
    predictors: list = field(default_factory=lambda: ["persistence", "moving_average(3)", "seasonal_naive(24)",
                                                      "ar(1)", "ar(2)"])
    bootstrap: dict = field(default_factory=lambda: {"outer": 8, "inner": 32, "studentize": 20,
                                                     "resample_size": 100, "heldout": True})
    conservative: bool = False
    episodes: int = 5
    warmup_days: int = 7
    shift_mean: float = 1.0
    shift_sd: float = 1.0

    def validate(self) -> "RunConfig":
        try:
            self.mode = normalize_mode(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.alpha < 1 or not 0 < self.eta < 1:
            raise ConfigError("alpha and eta must lie in (0, 1)")
        if self.tol <= 0 or self.sim_tol <= 0:
            raise ConfigError("tolerances must be positive")
        for name in ("theta", "beta", "a", "t_floor"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ConfigError(f"{name} must be positive")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.episodes < 1 or self.warmup_days < 1:
            raise ConfigError("episodes and warmup_days must be >= 1")
        if self.shift_mean <= 0 or self.shift_sd <= 0:
            raise ConfigError("shift factors must be positive")
        try:
            self.bootstrap_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bootstrap: {exc}") from exc
        return self

    def bootstrap_config(self) -> BootstrapConfig:
        return BootstrapConfig(alpha=self.alpha, eta=self.eta, seed=self.seed, **self.bootstrap)

    def apply_to(self, scenario: ScenarioConfig) -> ScenarioConfig:
        """Override the city weights that were given explicitly."""
        changes = {k: v for k, v in (("fairness_weight", self.theta), ("charge_weight", self.beta),
                                      ("fairness_power", self.a), ("t_floor", self.t_floor)) if v is not None}
        city = replace(scenario.city, **changes) if changes else scenario.city
        return replace(scenario, city=city, shift_mean=self.shift_mean, shift_sd=self.shift_sd)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = RunConfig.from_dict(data)
    # relative data paths are relative to the config file
    if not os.path.isabs(cfg.data_dir):
        cfg.data_dir = str(path.parent / cfg.data_dir)
    return cfg


# ---------------------------------------------------------------------------
# generator

def gen_data(out_dir, seed: int = 0, *, n_regions: int = 5, fleet_size: int = 120, n_intervals_per_day: int = 24,
             horizon: int = 2, days: int = 7, **scenario_kw) -> dict:
    """Write a synthetic city and a heuristic-policy history to ``out_dir``.

    Returns the paths written. Output is a pure function of the arguments.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"{out} is not writable")
    scenario = make_scenario(n_regions, seed, fleet_size=fleet_size, n_intervals_per_day=n_intervals_per_day,
                             horizon=horizon, **scenario_kw)
    history, _ = warm_up(scenario, days=days)
    write_scenario(out, scenario)
    write_history(out / "history_demand.csv", np.rint(history.r).astype(int))
    write_history(out / "history_supply.csv", np.rint(history.c).astype(int))
    _write_json(out / "config.json", replace(RunConfig(seed=seed), data_dir=".", out="out").to_dict())
    return {name: str(out / name) for name in ("regions.csv", "costs.csv", "kernel.json", "scenario.json",
                                               "history_demand.csv", "history_supply.csv", "config.json")}
