"""Synthetic ground truth and receding-horizon evaluation of balancing policies.

Vehicles are integer counts. Each interval the policy plans over the next
``horizon`` intervals and only the first interval's dispatch is executed
(rounded by largest remainder per origin row). Low-battery vehicles that
end up in a region with a station join that station's FIFO queue; ports
serve the queue and finishers re-enter service as vacant vehicles, which
is the realized charging supply c. Vacant and occupied vehicles move by
multinomial draws from the transition kernel.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import forecast as fc
from .model import (BalancingDecision, CityModel, FleetState, ModelError, TransitionKernel, balancing_cost,
                    charging_fairness, largest_remainder_round, mobility_fairness, net_inflow)
from .reformulation import BalancingProblem, InfeasibleProgram, normalize_mode
from .uncertainty import BootstrapConfig, EstimationReport, MomentUncertaintySet, run_estimation

log = logging.getLogger(__name__)

LOG_COLUMNS = ("episode", "k", "M_b", "M_m", "M_c", "solve_ms", "flags")
SCHEMA_LINE = "# schema=1"


# ---------------------------------------------------------------------------
# scenario

@dataclass(frozen=True)
class ScenarioConfig:
    city: CityModel
    kernel: TransitionKernel
    demand_mean: np.ndarray          # (K, N)
    demand_sd: np.ndarray            # (K, N)
    ports: np.ndarray                # (N,), zero off the charging regions
    duration_probs: np.ndarray       # P(duration = 1, 2, ... intervals)
    initial_vacant: np.ndarray
    initial_occupied: np.ndarray
    initial_lowbatt: np.ndarray
    demand_law: str = "normal"
    shift_mean: float = 1.0
    shift_sd: float = 1.0
    episode_length: int = 24
    start_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        N = self.city.n_regions
        for name in ("demand_mean", "demand_sd"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape[1] != N or np.any(arr < 0):
                raise ModelError(f"{name} must be a nonnegative (K, N) array")
            object.__setattr__(self, name, arr)
        ports = np.asarray(self.ports, dtype=int)
        if ports.shape != (N,) or np.any(ports[self.city.sigma_mask] < 1):
            raise ModelError("every charging region needs at least one port")
        object.__setattr__(self, "ports", np.where(self.city.sigma_mask, ports, 0))
        probs = np.asarray(self.duration_probs, dtype=float)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
            raise ModelError("duration_probs must be a probability vector")
        object.__setattr__(self, "duration_probs", probs)
        for name in ("initial_vacant", "initial_occupied", "initial_lowbatt"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=int))
        if self.demand_law not in ("normal", "poisson"):
            raise ModelError("demand_law must be 'normal' or 'poisson'")

    @property
    def n_intervals_per_day(self) -> int:
        return self.demand_mean.shape[0]

    @property
    def fleet_size(self) -> int:
        return int(self.initial_vacant.sum() + self.initial_occupied.sum() + self.initial_lowbatt.sum())

    def shifted(self, mean: float = 1.3, sd: float = 2.0) -> "ScenarioConfig":
        return replace(self, shift_mean=mean, shift_sd=sd)


def _daily_profile(K: int) -> np.ndarray:
    t = np.arange(K) / K
    # morning and evening peaks over a low night floor
    return 0.35 + 0.65 * (np.exp(-((t - 0.33) / 0.08) ** 2) + 0.8 * np.exp(-((t - 0.75) / 0.1) ** 2))


def make_scenario(n_regions: int = 5, seed: int = 0, *, fleet_size: int = 120, n_intervals_per_day: int = 24,
                  horizon: int = 2, n_stations: Optional[int] = None, episode_length: Optional[int] = None,
                  lowbatt_rate: float = 0.06, move_limit: float = 7.0, fairness_weight: float = 1.0,
                  fairness_power: float = 1.0, charge_weight: float = 1.0, t_floor: float = 1e-3,
                  demand_law: str = "normal") -> ScenarioConfig:
    """Random city on a 10 km square with a gravity-model transition kernel."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    N, K = n_regions, n_intervals_per_day
    pts = rng.uniform(0.0, 10.0, size=(N, 2))
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    if n_stations is None:
        n_stations = max(1, int(math.ceil(N / 3)))
    sigma = tuple(sorted(rng.choice(N, size=n_stations, replace=False).tolist()))
    W_low = dist.copy()
    city = CityModel(n_regions=N, horizon=horizon, charging_regions=sigma, vacant_cost=dist, lowbatt_cost=W_low,
                     move_limit_vacant=move_limit, move_limit_lowbatt=move_limit, charge_weight=charge_weight,
                     fairness_weight=fairness_weight, fairness_power=fairness_power, t_floor=t_floor,
                     n_intervals_per_day=K)
    profile = _daily_profile(K)
    attract = rng.uniform(0.5, 1.5, size=N)
    if N == 1:
        one = np.ones((K, 1, 1))
        zero = np.zeros((K, 1, 1))
        kernel = TransitionKernel(one, zero, zero, one.copy(), zero.copy())
    else:
        grav = np.exp(-dist / 3.0) * attract[None, :]
        grav /= grav.sum(axis=1, keepdims=True)
        P_v = np.empty((K, N, N))
        P_o = np.empty((K, N, N))
        P_l = np.empty((K, N, N))
        Q_v = np.empty((K, N, N))
        Q_o = np.empty((K, N, N))
        stay = np.eye(N)
        for k in range(K):
            po = 0.12 + 0.3 * profile[k] / profile.max()
            pv = 1.0 - po - lowbatt_rate
            P_v[k] = pv * (0.5 * stay + 0.5 * grav)
            P_o[k] = po * grav
            P_l[k] = lowbatt_rate * (0.7 * stay + 0.3 * grav)
            Q_v[k] = 0.55 * grav
            Q_o[k] = 0.45 * grav
        kernel = TransitionKernel(P_v, P_o, P_l, Q_v, Q_o)
    # requests per interval scale with its length (one hour at K = 24)
    base = attract * fleet_size / (2.0 * N) * (24.0 / K)
    mean = np.outer(profile, base)
    sd = np.sqrt(mean) + 0.1 * mean
    ports = np.where(city.sigma_mask, rng.integers(3, 7, size=N), 0)
    share = rng.dirichlet(np.ones(N) * 3.0)
    total = fleet_size
    V0 = largest_remainder_round(share * total * 0.7, int(round(total * 0.7)))
    O0 = largest_remainder_round(share * total * 0.25, int(round(total * 0.25)))
    L0 = np.zeros(N, dtype=int)
    L0_total = total - V0.sum() - O0.sum()
    L0[:] = largest_remainder_round(share * L0_total, L0_total)
    return ScenarioConfig(city=city, kernel=kernel, demand_mean=mean, demand_sd=sd, ports=ports,
                          duration_probs=np.array([0.5, 0.3, 0.2]), initial_vacant=V0, initial_occupied=O0,
                          initial_lowbatt=L0, demand_law=demand_law,
                          episode_length=episode_length or K, seed=seed)


# ---------------------------------------------------------------------------
# charging stations

class ChargingStations:
    """FIFO queues in front of a fixed number of ports per region."""

    def __init__(self, ports, duration_probs):
        self.ports = np.asarray(ports, dtype=int)
        self.duration_probs = np.asarray(duration_probs, dtype=float)
        self.waiting = np.zeros(self.ports.size, dtype=int)
        self.in_service = [deque() for _ in range(self.ports.size)]

    def join(self, counts) -> None:
        counts = np.asarray(counts, dtype=int)
        if np.any(counts[self.ports == 0] > 0):
            raise ModelError("low-battery vehicles queued at a region without ports")
        self.waiting += counts

    @property
    def occupancy(self) -> np.ndarray:
        return self.waiting + np.array([len(q) for q in self.in_service], dtype=int)

    def step(self, rng: np.random.Generator) -> np.ndarray:
        """Admit from the queues, advance one interval, return finishers per region."""
        done = np.zeros(self.ports.size, dtype=int)
        for i in np.flatnonzero(self.ports):
            service = self.in_service[i]
            free = self.ports[i] - len(service)
            admit = min(free, int(self.waiting[i]))
            if admit > 0:
                self.waiting[i] -= admit
                durations = rng.choice(np.arange(1, self.duration_probs.size + 1), size=admit,
                                       p=self.duration_probs)
                service.extend(int(x) for x in durations)
            remaining = [t - 1 for t in service]
            done[i] = sum(1 for t in remaining if t <= 0)
            self.in_service[i] = deque(t for t in remaining if t > 0)
        return done


def sample_demand(rng: np.random.Generator, scenario: ScenarioConfig, k: int) -> np.ndarray:
    """Realized demand in interval-of-day ``k``; normal draws are redrawn below zero."""
    K = scenario.n_intervals_per_day
    mean = scenario.demand_mean[k % K] * scenario.shift_mean
    sd = scenario.demand_sd[k % K] * scenario.shift_sd
    if scenario.demand_law == "poisson":
        return rng.poisson(mean).astype(float)
    out = rng.normal(mean, sd)
    bad = out < 0
    while bad.any():
        out[bad] = rng.normal(mean[bad], sd[bad])
        bad = out < 0
    return out


def sample_interval(rng: np.random.Generator, scenario: ScenarioConfig, k: int,
                    stations: ChargingStations) -> tuple[np.ndarray, np.ndarray]:
    """Realized (demand r, charging supply c) for interval ``k``."""
    r = sample_demand(rng, scenario, k)
    c = stations.step(rng).astype(float)
    return r, c


def _round_moves(moves: np.ndarray, available: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    out = np.zeros(moves.shape, dtype=int)
    for i in range(moves.shape[0]):
        row = np.where(allowed[i], np.maximum(moves[i], 0.0), 0.0)
        total = min(int(round(row.sum())), int(available[i]))
        if total > 0:
            out[i] = largest_remainder_round(row * (total / row.sum()), total)
    return out


def _transition(rng, counts, blocks):
    """Multinomial split of each origin's count over the stacked destination blocks."""
    N = counts.size
    out = [np.zeros(N, dtype=int) for _ in blocks]
    probs = np.concatenate(blocks, axis=1)
    probs = probs / probs.sum(axis=1, keepdims=True)
    for j in range(N):
        if counts[j] > 0:
            draw = rng.multinomial(int(counts[j]), probs[j])
            for b in range(len(blocks)):
                out[b] += draw[b * N:(b + 1) * N]
    return out


# ---------------------------------------------------------------------------
# policies

@dataclass
class PolicyContext:
    k: int                     # interval of day
    state: FleetState
    history_r: np.ndarray      # (T, N) realized demand so far
    history_c: np.ndarray      # (T, N) realized charging supply so far
    history_S: np.ndarray      # (T, N) executed post-balancing supply so far
    first_interval: int        # interval-of-day of history row 0


class Policy:
    kind = "base"

    def decide(self, ctx: PolicyContext, scenario: ScenarioConfig):
        """Return (X, Y, flags) for the current interval."""
        raise NotImplementedError


class NearestStationPolicy(Policy):
    """Heuristic: no vacant moves; each low-battery vehicle heads to its closest reachable station."""

    kind = "heuristic"

    def decide(self, ctx, scenario):
        city = scenario.city
        N = city.n_regions
        X = np.zeros((N, N))
        Y = np.zeros((N, N))
        arcs = city.lowbatt_arcs
        for i in range(N):
            if city.sigma_mask[i] or ctx.state.lowbatt[i] <= 0 or not arcs[i].any():
                continue
            cost = np.where(arcs[i], city.lowbatt_cost[i], np.inf)
            Y[i, int(np.argmin(cost))] = ctx.state.lowbatt[i]
        return X, Y, []


@dataclass
class DROPolicy(Policy):
    """Plan with the conic program in one of its modes.

    ``demand_report`` / ``supply_report`` supply (Sigma, omega, gamma); the
    sets are re-centered on the current forecast each interval. Without
    reports (or in non-robust mode) the sets are singletons.
    """

    mode: str = "counterpart"
    demand_spec: fc.PredictorSpec = field(default_factory=lambda: fc.PredictorSpec("ar", order=1))
    supply_spec: fc.PredictorSpec = field(default_factory=lambda: fc.PredictorSpec("ar", order=1))
    demand_report: Optional[EstimationReport] = None
    supply_report: Optional[EstimationReport] = None
    conservative: bool = False
    # decisions are rounded to whole vehicles, so closed-loop runs solve loosely
    tol: float = 1e-4
    tighten: bool = True
    fit_window: int = 24 * 7

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)

    @property
    def kind(self):
        return {"counterpart": "dro_counterpart", "theorem1": "dro_theorem1", "non_robust": "non_robust"}[self.mode]

    def _set(self, report, center, d):
        if report is None:
            return MomentUncertaintySet(center, np.eye(d), 0.0, 1.0)
        omega = report.omega_region[1] if self.conservative else report.omega_hat
        gamma = report.gamma_region[1] if self.conservative else report.gamma_hat
        return MomentUncertaintySet(center, report.sigma_hat, max(omega, 0.0), gamma)

    def forecasts(self, ctx: PolicyContext, horizon: int):
        out = []
        for spec, hist in ((self.demand_spec, ctx.history_r), (self.supply_spec, ctx.history_c)):
            window = hist[-self.fit_window:]
            fitted = fc.fit(spec, fc.SeriesHistory(window), horizon)
            out.append(fc.predict(fitted, window, horizon).point)
        return out

    def ratio_history(self, ctx: PolicyContext, horizon: int):
        """Mean demand and supply per interval-of-day for the planning window."""
        T = ctx.history_S.shape[0]
        if T == 0:
            return None, None
        K = self._period
        tod = (ctx.first_interval + np.arange(T)) % K
        S_rows, r_rows = [], []
        for h in range(horizon):
            mask = tod == (ctx.k + h) % K
            if not mask.any():
                return None, None
            S_rows.append(ctx.history_S[mask].mean(axis=0))
            r_rows.append(ctx.history_r[mask].mean(axis=0))
        return np.array(S_rows), np.array(r_rows)

    def decide(self, ctx, scenario):
        city = scenario.city
        N, tau = city.n_regions, city.horizon
        self._period = scenario.n_intervals_per_day
        r_hat, c_hat = self.forecasts(ctx, tau)
        dset = self._set(self.demand_report, r_hat, N * tau)
        cset = self._set(self.supply_report, c_hat, N * tau)
        hist_S, hist_r = self.ratio_history(ctx, tau)
        try:
            prob = BalancingProblem(city, scenario.kernel, ctx.state, dset, cset, self.mode,
                                    start_interval=ctx.k, history_S=hist_S, history_r=hist_r)
            sol = prob.solve(tol=self.tol, tighten=self.tighten)
        except (ModelError, InfeasibleProgram) as exc:
            log.info("interval %d: %s", ctx.k, exc)
            return np.zeros((N, N)), np.zeros((N, N)), ["solver_failure"]
        flags = []
        if not sol.optimal:
            flags.append(f"status_{sol.status}")
            return np.zeros((N, N)), np.zeros((N, N)), flags + ["solver_failure"]
        if sol.relaxation > 1e-6:
            flags.append("relaxed_bounds")
        return sol.decision.vacant_moves[0], sol.decision.lowbatt_moves[0], flags


# ---------------------------------------------------------------------------
# episodes and logs

@dataclass
class IntervalRecord:
    episode: int
    k: int
    r: np.ndarray
    c: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    T: np.ndarray
    state: FleetState
    M_b: float
    M_m: float
    M_c: float
    solve_ms: float
    flags: list


@dataclass
class SimulationLog:
    policy: str
    records: list = field(default_factory=list)

    def metric(self, name: str) -> np.ndarray:
        return np.array([getattr(rec, name) for rec in self.records])

    def episodes(self) -> list[int]:
        return sorted({rec.episode for rec in self.records})

    def daily_cost(self) -> np.ndarray:
        eps = self.episodes()
        return np.array([sum(r.M_b for r in self.records if r.episode == e) for e in eps])

    def per_episode(self, name: str, reduce=np.mean) -> np.ndarray:
        return np.array([reduce([getattr(r, name) for r in self.records if r.episode == e]) for e in self.episodes()])

    def aggregate(self) -> dict:
        out = {"policy": self.policy, "episodes": len(self.episodes()), "intervals": len(self.records)}
        daily = self.daily_cost()
        out["daily_cost_mean"] = float(daily.mean()) if daily.size else 0.0
        out["daily_cost_var"] = float(daily.var(ddof=1)) if daily.size > 1 else 0.0
        for name in ("M_b", "M_m", "M_c", "solve_ms"):
            vals = self.per_episode(name)
            out[f"{name}_mean"] = float(vals.mean()) if vals.size else 0.0
            out[f"{name}_var"] = float(vals.var(ddof=1)) if vals.size > 1 else 0.0
        out["flagged_intervals"] = int(sum(1 for r in self.records if r.flags))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SCHEMA_LINE + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for rec in self.records:
            # + 0.0 turns -0.0 into 0.0
            metrics = [repr(float(v) + 0.0) for v in (rec.M_b, rec.M_m, rec.M_c)]
            w.writerow([rec.episode, rec.k, *metrics, f"{rec.solve_ms:.3f}", ";".join(rec.flags)])
        return buf.getvalue()

    def write(self, csv_path, json_path=None, include_timing: bool = True) -> None:
        text = self.to_csv()
        if not include_timing:
            text = _strip_timing(text)
        with open(csv_path, "w") as fh:
            fh.write(text)
        if json_path is not None:
            agg = self.aggregate()
            if not include_timing:
                agg = {k: v for k, v in agg.items() if not k.startswith("solve_ms")}
            with open(json_path, "w") as fh:
                json.dump(agg, fh, indent=1, sort_keys=True)


def _strip_timing(text: str) -> str:
    lines = text.splitlines()
    out = lines[:2]
    for line in lines[2:]:
        parts = line.split(",")
        parts[5] = "0"
        out.append(",".join(parts))
    return "\n".join(out) + "\n"


def read_log(path) -> list[dict]:
    with open(path) as fh:
        first = fh.readline().strip()
        if first != SCHEMA_LINE:
            raise ValueError(f"{path}: missing '{SCHEMA_LINE}' header")
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("M_b", "M_m", "M_c", "solve_ms"):
            row[key] = float(row[key])
        row["episode"] = int(row["episode"])
        row["k"] = int(row["k"])
    return rows


@dataclass
class History:
    r: np.ndarray
    c: np.ndarray
    S: np.ndarray
    first_interval: int = 0

    def append(self, r, c, S) -> None:
        self.r = np.vstack([self.r, r[None]])
        self.c = np.vstack([self.c, c[None]])
        self.S = np.vstack([self.S, S[None]])


def _floor_one(values, flags, name):
    if np.any(values < 1):
        flags.append(f"{name}_floored")
    return np.maximum(values, 1.0)


def run_episode(policy: Policy, scenario: ScenarioConfig, episode: int = 0, history: Optional[History] = None,
                warm_state: Optional[tuple] = None, log_out: Optional[SimulationLog] = None) -> SimulationLog:
    city = scenario.city
    N = city.n_regions
    K = scenario.n_intervals_per_day
    ss = np.random.SeedSequence([scenario.seed, episode, 11])
    rng_demand, rng_move, rng_charge = (np.random.default_rng(s) for s in ss.spawn(3))
    if warm_state is None:
        V = scenario.initial_vacant.copy()
        O = scenario.initial_occupied.copy()
        L = scenario.initial_lowbatt.copy()
        stations = ChargingStations(scenario.ports, scenario.duration_probs)
    else:
        V, O, L, stations = warm_state
        V, O, L = V.copy(), O.copy(), L.copy()
        stations = _copy_stations(stations)
    fleet = scenario.fleet_size
    if history is None:
        history = History(np.zeros((0, N)), np.zeros((0, N)), np.zeros((0, N)), scenario.start_interval)
    else:
        history = History(history.r.copy(), history.c.copy(), history.S.copy(), history.first_interval)
    out = log_out if log_out is not None else SimulationLog(getattr(policy, "kind", "policy"))
    first_k = (history.first_interval + history.r.shape[0]) % K
    for step in range(scenario.episode_length):
        k = (first_k + step) % K
        state = FleetState(V, O, L, stations.occupancy)
        ctx = PolicyContext(k, state, history.r, history.c, history.S, history.first_interval)
        t0 = time.perf_counter()
        Xf, Yf, flags = policy.decide(ctx, scenario)
        solve_ms = 1e3 * (time.perf_counter() - t0)
        flags = list(flags)
        X = _round_moves(Xf, V, city.vacant_arcs)
        Y = _round_moves(Yf, L, city.lowbatt_arcs)
        S = V + net_inflow(X).astype(int)
        L_post = L + net_inflow(Y).astype(int)
        T = np.where(city.sigma_mask, net_inflow(Y), 0.0)
        stations.join(np.where(city.sigma_mask, L_post, 0))
        L_keep = np.where(city.sigma_mask, 0, L_post)
        r = sample_demand(rng_demand, scenario, k)
        c = stations.step(rng_charge)
        M_b = balancing_cost(BalancingDecision(X.astype(float), Y.astype(float)), city)
        M_m = mobility_fairness(r, _floor_one(S.astype(float), flags, "supply"))
        sig = city.sigma_mask
        M_c = charging_fairness(c[sig].astype(float), _floor_one(T[sig], flags, "charging_inflow"))
        kern = scenario.kernel.at(k)
        vS, oS, lS = _transition(rng_move, S, [kern.P_v[0], kern.P_o[0], kern.P_l[0]])
        vO, oO = _transition(rng_move, O, [kern.Q_v[0], kern.Q_o[0]])
        V = vS + vO + c
        O = oS + oO
        L = L_keep + lS
        total = V.sum() + O.sum() + L.sum() + stations.occupancy.sum()
        if total != fleet:
            raise AssertionError(f"fleet count {total} != {fleet} at interval {step}")
        history.append(r, c.astype(float), S.astype(float))
        out.records.append(IntervalRecord(episode, k, r, c.astype(float), X, Y, S, T,
                                          FleetState(V, O, L, stations.occupancy), M_b, M_m, M_c, solve_ms, flags))
    out.final = (V, O, L, stations, history)
    return out


def _copy_stations(st: ChargingStations) -> ChargingStations:
    new = ChargingStations(st.ports, st.duration_probs)
    new.waiting = st.waiting.copy()
    new.in_service = [deque(q) for q in st.in_service]
    return new


def warm_up(scenario: ScenarioConfig, days: int = 7, seed_offset: int = 10_000):
    """Run the heuristic policy for ``days`` to produce history and a warm state."""
    sc = replace(scenario, episode_length=days * scenario.n_intervals_per_day, shift_mean=1.0, shift_sd=1.0)
    lg = run_episode(NearestStationPolicy(), sc, episode=seed_offset)
    V, O, L, stations, history = lg.final
    return history, (V, O, L, stations)


def run_receding_horizon(policy: Policy, scenario: ScenarioConfig, episodes: int, *, history: History = None,
                         warm_state=None, first_episode: int = 0) -> SimulationLog:
    out = SimulationLog(getattr(policy, "kind", "policy"))
    for e in range(first_episode, first_episode + episodes):
        run_episode(policy, scenario, e, history, warm_state, out)
    return out


def estimate_sets(history: History, config: BootstrapConfig, horizon: int,
                  demand_spec: fc.PredictorSpec, supply_spec: fc.PredictorSpec, window: int = None):
    """Bootstrap reports for demand and supply residuals from the warm-up history."""
    r = history.r if window is None else history.r[-window:]
    c = history.c if window is None else history.c[-window:]
    rep_r = run_estimation(fc.SeriesHistory(r), demand_spec, config, horizon)
    rep_c = run_estimation(fc.SeriesHistory(c, role="supply"), supply_spec, replace(config, seed=config.seed + 1),
                           horizon)
    return rep_r, rep_c


def compare_policies(policies: dict, scenario: ScenarioConfig, episodes: int, *, history=None,
                     warm_state=None) -> dict:
    """Paired-seed comparison; the first policy is the reference."""
    if len(policies) < 2:
        raise ValueError("need at least two policies")
    logs = {name: run_receding_horizon(p, scenario, episodes, history=history, warm_state=warm_state)
            for name, p in policies.items()}
    return comparison_report(logs), logs


def _pct(new: float, ref: float) -> float:
    if ref == 0:
        return 0.0 if new == 0 else math.copysign(math.inf, new)
    return 100.0 * (new - ref) / abs(ref)


def comparison_report(logs: dict) -> dict:
    names = list(logs)
    ref = names[0]
    rows = {}
    for name in names:
        lg = logs[name]
        daily = lg.daily_cost()
        rows[name] = {
            "daily_cost_mean": float(daily.mean()),
            "daily_cost_var": float(daily.var(ddof=1)) if daily.size > 1 else 0.0,
            "daily_cost_p90": float(np.quantile(daily, 0.9)) if daily.size else 0.0,
            "M_m_mean": float(lg.metric("M_m").mean()),
            "M_c_mean": float(lg.metric("M_c").mean()),
            "solve_ms_mean": float(lg.metric("solve_ms").mean()),
            "solve_ms_max": float(lg.metric("solve_ms").max()),
        }
    for name in names:
        r, b = rows[name], rows[ref]
        r["pct_daily_cost"] = _pct(r["daily_cost_mean"], b["daily_cost_mean"])
        # fairness metrics are <= 0, so a positive percentage is an improvement
        r["pct_M_m"] = _pct(r["M_m_mean"], b["M_m_mean"])
        r["pct_M_c"] = _pct(r["M_c_mean"], b["M_c_mean"])
    return {"reference": ref, "policies": rows}
