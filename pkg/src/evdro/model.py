"""City/fleet data model, fleet dynamics and cost/fairness metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

# Forbidden low-battery arcs (destination without a charging station) carry
# this sentinel instead of an arithmetic infinity.
FORBIDDEN = np.finfo(float).max

ROW_SUM_TOL = 1e-9


class ModelError(ValueError):
    pass


def _as_interval_array(value, n_intervals: int, n_regions: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n_intervals, float(arr))
    if arr.shape not in ((n_intervals,), (n_intervals, n_regions)):
        raise ModelError(f"bound has shape {arr.shape}, expected ({n_intervals},) or ({n_intervals}, {n_regions})")
    return arr


@dataclass(frozen=True)
class CityModel:
    n_regions: int
    horizon: int
    charging_regions: tuple
    vacant_cost: np.ndarray
    lowbatt_cost: np.ndarray
    move_limit_vacant: float
    move_limit_lowbatt: float
    ratio_lower: Optional[np.ndarray] = None
    ratio_upper: Optional[np.ndarray] = None
    charge_weight: float = 1.0
    fairness_weight: float = 1.0
    fairness_power: float = 1.0
    t_floor: float = 1e-3
    n_intervals_per_day: int = 24

    def __post_init__(self):
        N = self.n_regions
        sigma = tuple(sorted(int(i) for i in self.charging_regions))
        object.__setattr__(self, "charging_regions", sigma)
        W = np.asarray(self.vacant_cost, dtype=float)
        Ws = np.array(self.lowbatt_cost, dtype=float)
        if W.shape != (N, N) or Ws.shape != (N, N):
            raise ModelError("cost matrices must be N x N")
        if not sigma or min(sigma) < 0 or max(sigma) >= N:
            raise ModelError("charging region set must be a nonempty subset of regions")
        Ws[~np.isfinite(Ws)] = FORBIDDEN
        off = np.ones(N, dtype=bool)
        off[list(sigma)] = False
        Ws[:, off] = FORBIDDEN
        np.fill_diagonal(Ws, np.where(off, FORBIDDEN, 0.0))
        if np.any(W < 0) or np.any(Ws < 0) or np.any(np.diag(W) != 0):
            raise ModelError("costs must be nonnegative with zero diagonal")
        object.__setattr__(self, "vacant_cost", W)
        object.__setattr__(self, "lowbatt_cost", Ws)
        if self.move_limit_vacant <= 0 or self.move_limit_lowbatt <= 0:
            raise ModelError("move limits must be positive")
        if self.charge_weight <= 0 or self.fairness_weight <= 0 or self.fairness_power <= 0:
            raise ModelError("beta, theta and a must be positive")
        if self.t_floor <= 0:
            raise ModelError("t_floor must be positive")
        for name in ("ratio_lower", "ratio_upper"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _as_interval_array(val, self.horizon, N))
        if self.ratio_lower is not None and self.ratio_upper is not None:
            if np.any(self.ratio_lower > self.ratio_upper):
                raise ModelError("ratio_lower must not exceed ratio_upper")

    @property
    def sigma_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_regions, dtype=bool)
        mask[list(self.charging_regions)] = True
        return mask

    @property
    def vacant_arcs(self) -> np.ndarray:
        """Boolean N x N mask of arcs a vacant EV may use (self-loops excluded)."""
        mask = self.vacant_cost < self.move_limit_vacant
        np.fill_diagonal(mask, False)
        return mask

    @property
    def lowbatt_arcs(self) -> np.ndarray:
        mask = (self.lowbatt_cost < self.move_limit_lowbatt) & (self.lowbatt_cost != FORBIDDEN)
        mask &= self.sigma_mask[None, :]
        np.fill_diagonal(mask, False)
        return mask

    def with_bounds(self, lower, upper) -> "CityModel":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(ratio_lower=lower, ratio_upper=upper)
        return CityModel(**kw)


@dataclass(frozen=True)
class TransitionKernel:
    """Per-interval region transition matrices, each of shape (K, N, N).

    Entry ``[k, j, i]`` is the probability that a vehicle in region j at the
    start of interval k is in region i (with the given status) at k+1.
    """

    P_v: np.ndarray
    P_o: np.ndarray
    P_l: np.ndarray
    Q_v: np.ndarray
    Q_o: np.ndarray

    def __post_init__(self):
        mats = {}
        for name in ("P_v", "P_o", "P_l", "Q_v", "Q_o"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 2:
                arr = arr[None]
            mats[name] = arr
            object.__setattr__(self, name, arr)
        shapes = {a.shape for a in mats.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 3 or next(iter(shapes))[1] != next(iter(shapes))[2]:
            raise ModelError(f"kernel matrices must share one (K, N, N) shape, got {shapes}")
        if any(np.any(a < 0) for a in mats.values()):
            raise ModelError("kernel entries must be nonnegative")

    @property
    def n_regions(self) -> int:
        return self.P_v.shape[1]

    @property
    def n_periods(self) -> int:
        return self.P_v.shape[0]

    def at(self, k: int) -> "TransitionKernel":
        """Matrices for interval ``k`` (cyclic over the stored periods)."""
        p = k % self.n_periods
        return TransitionKernel(self.P_v[p], self.P_o[p], self.P_l[p], self.Q_v[p], self.Q_o[p])

    def row_sum_error(self) -> float:
        vac = (self.P_l + self.P_v + self.P_o).sum(axis=2)
        occ = (self.Q_o + self.Q_v).sum(axis=2)
        return float(max(np.abs(vac - 1).max(), np.abs(occ - 1).max()))

    def validate(self, tol: float = ROW_SUM_TOL) -> None:
        err = self.row_sum_error()
        if err > tol:
            raise ModelError(f"kernel rows do not sum to one (max error {err:.3g})")


@dataclass(frozen=True)
class FleetState:
    vacant: np.ndarray
    occupied: np.ndarray
    lowbatt: np.ndarray
    in_charging: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.vacant, dtype=float)
        for name in ("vacant", "occupied", "lowbatt", "in_charging"):
            val = getattr(self, name)
            arr = np.zeros_like(v) if val is None else np.asarray(val, dtype=float)
            if arr.shape != v.shape:
                raise ModelError(f"{name} has shape {arr.shape}, expected {v.shape}")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ModelError(f"{name} must be finite and nonnegative")
            object.__setattr__(self, name, arr)

    @property
    def total(self) -> float:
        return float(self.vacant.sum() + self.occupied.sum() + self.lowbatt.sum() + self.in_charging.sum())


def net_inflow(moves: np.ndarray) -> np.ndarray:
    """Column sums minus row sums: vehicles gained by each region."""
    moves = np.asarray(moves, dtype=float)
    return moves.sum(axis=0) - moves.sum(axis=1)


@dataclass(frozen=True)
class BalancingDecision:
    """Dispatch matrices for each planned interval, shape (tau, N, N)."""

    vacant_moves: np.ndarray
    lowbatt_moves: np.ndarray
    post_supply: np.ndarray = field(default=None)
    net_charging_inflow: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.vacant_moves, dtype=float)
        Y = np.asarray(self.lowbatt_moves, dtype=float)
        if X.ndim == 2:
            X = X[None]
        if Y.ndim == 2:
            Y = Y[None]
        if X.shape != Y.shape or X.shape[1] != X.shape[2]:
            raise ModelError("X and Y must both be (tau, N, N)")
        object.__setattr__(self, "vacant_moves", X)
        object.__setattr__(self, "lowbatt_moves", Y)

    @property
    def horizon(self) -> int:
        return self.vacant_moves.shape[0]

    @classmethod
    def zeros(cls, horizon: int, n: int) -> "BalancingDecision":
        z = np.zeros((horizon, n, n))
        return cls(z, z.copy())

    def interval(self, k: int) -> "BalancingDecision":
        return BalancingDecision(self.vacant_moves[k], self.lowbatt_moves[k])

    def derived(self, city: CityModel, vacant0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Interval-0 post-balancing supply S and net charging inflow T."""
        S = net_inflow(self.vacant_moves[0]) + np.asarray(vacant0, dtype=float)
        T = np.where(city.sigma_mask, net_inflow(self.lowbatt_moves[0]), 0.0)
        return S, T

    def check(self, city: CityModel, tol: float = 1e-9) -> None:
        if np.any(self.vacant_moves < -tol) or np.any(self.lowbatt_moves < -tol):
            raise ModelError("dispatch counts must be nonnegative")
        diag = np.eye(city.n_regions, dtype=bool)
        if np.any(np.abs(self.vacant_moves[:, ~city.vacant_arcs & ~diag]) > tol):
            raise ModelError("vacant flow on an arc beyond the move limit")
        off = ~city.lowbatt_arcs & ~diag
        if np.any(np.abs(self.lowbatt_moves[:, off]) > tol):
            raise ModelError("low-battery flow on a forbidden arc")


def step_dynamics(state: FleetState, decision: BalancingDecision, realized_c, kernel: TransitionKernel,
                  k: int = 0) -> FleetState:
    """Advance (V, O, L) one interval with the fleet recursions.

    ``decision`` holds the interval's X and Y (its first interval is used);
    ``realized_c`` replaces the forecast charging-completion supply.
    """
    kern = kernel.at(k)
    err = kern.row_sum_error()
    if err > ROW_SUM_TOL:
        raise ModelError(f"kernel rows do not sum to one (max error {err:.3g})")
    N = kern.n_regions
    c = np.asarray(realized_c, dtype=float)
    if state.vacant.shape != (N,) or c.shape != (N,) or decision.vacant_moves.shape[1:] != (N, N):
        raise ModelError("dimension mismatch between state, decision, supply and kernel")
    if np.any(c < 0):
        raise ModelError("realized supply must be nonnegative")
    X = decision.vacant_moves[0]
    Y = decision.lowbatt_moves[0]
    S = net_inflow(X) + state.vacant
    P_v, P_o, P_l, Q_v, Q_o = kern.P_v[0], kern.P_o[0], kern.P_l[0], kern.Q_v[0], kern.Q_o[0]
    V = P_v.T @ S + Q_v.T @ state.occupied + c
    O = P_o.T @ S + Q_o.T @ state.occupied
    L = net_inflow(Y) + P_l.T @ S
    for arr in (V, O, L):
        arr[(arr < 0) & (arr >= -1e-9)] = 0.0
    return FleetState(np.maximum(V, 0.0), np.maximum(O, 0.0), np.maximum(L, 0.0), state.in_charging)


def balancing_cost(decision: BalancingDecision, city: CityModel, k: int = 0) -> float:
    X = decision.vacant_moves[k]
    Y = decision.lowbatt_moves[k]
    forbidden = city.lowbatt_cost == FORBIDDEN
    if np.any(Y[forbidden] != 0):
        raise ModelError("low-battery flow on an infinite-cost arc")
    Ws = np.where(forbidden, 0.0, city.lowbatt_cost)
    return float(np.sum(X * city.vacant_cost) + city.charge_weight * np.sum(Y * Ws))


def mobility_fairness(r, S) -> float:
    r = np.asarray(r, dtype=float)
    S = np.asarray(S, dtype=float)
    if np.any(S <= 0):
        raise ModelError("mobility fairness needs positive supply in every region")
    return -float(np.sum(np.abs(r / S - r.sum() / S.sum())))


def charging_fairness(c, T) -> float:
    """``c`` and ``T`` are already restricted to the charging regions."""
    c = np.asarray(c, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ModelError("charging fairness needs positive low-battery inflow on charging regions")
    return -float(np.sum(np.abs(c / T - c.sum() / T.sum())))


def charging_unfairness(c, T, a: float, t_floor: float = 0.0) -> float:
    """Sum of c / T**a over every interval and charging region given."""
    c = np.asarray(c, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(T < t_floor) or np.any(T <= 0):
        raise ModelError("low-battery inflow below the floor")
    return float(np.sum(c / T ** a))


def global_ratio_bounds(history_S, history_r, history_r_upper=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-interval min/max of demand over supply across regions.

    Regions with zero supply and zero demand are skipped; zero supply under
    positive demand makes the upper bound infinite.
    """
    S = np.atleast_2d(np.asarray(history_S, dtype=float))
    r = np.atleast_2d(np.asarray(history_r, dtype=float))
    ru = r if history_r_upper is None else np.atleast_2d(np.asarray(history_r_upper, dtype=float))
    if S.shape != r.shape or ru.shape != r.shape:
        raise ModelError("history arrays must share one (tau, N) shape")
    lower = np.empty(S.shape[0])
    upper = np.empty(S.shape[0])
    for k in range(S.shape[0]):
        pos = S[k] > 0
        if not np.any(pos) and np.any(r[k] > 0):
            raise ModelError(f"interval {k}: zero supply with nonzero demand everywhere, no finite bound")
        if not np.any(pos):
            lower[k], upper[k] = 0.0, np.inf
            continue
        lower[k] = np.min(r[k, pos] / S[k, pos])
        upper[k] = np.max(ru[k, pos] / S[k, pos])
        if np.any(~pos & (ru[k] > 0)):
            upper[k] = np.inf
    return lower, upper


def compute_ratio_bounds(history_S, history_r, tighten: bool = False, *,
                         history_r_upper=None,
                         solve_relaxed: Optional[Callable] = None) -> tuple[np.ndarray, np.ndarray]:
    """Demand/supply ratio bounds that keep the balancing problem feasible.

    Without ``tighten`` the global bounds (min/max of the historical r/S
    ratios per interval) are returned. With ``tighten``, ``solve_relaxed``
    is called with the global bounds and must return ``(S_opt, r_lo, r_hi)``
    for the optimum of the L1-relaxed problem. Intervals where that plan
    meets the global bounds keep them; elsewhere the bounds are widened just
    enough to contain the plan's own ratio range, so the plan stays feasible.
    """
    lo_g, hi_g = global_ratio_bounds(history_S, history_r, history_r_upper)
    if not tighten:
        return lo_g, hi_g
    if solve_relaxed is None:
        raise ModelError("tightening needs a relaxed-problem solver")
    S_opt, r_lo, r_hi = solve_relaxed(lo_g, hi_g)
    lo_s, hi_s = global_ratio_bounds(np.atleast_2d(S_opt), r_lo, r_hi)
    return np.minimum(lo_g, lo_s), np.maximum(hi_g, hi_s)


def largest_remainder_round(values, total: int | None = None) -> np.ndarray:
    """Round nonnegative reals to integers preserving the (rounded) total."""
    values = np.maximum(np.asarray(values, dtype=float), 0.0)
    if total is None:
        total = int(round(values.sum()))
    floors = np.floor(values)
    short = total - int(floors.sum())
    out = floors.astype(int)
    if short > 0:
        order = np.argsort(-(values - floors), kind="stable")
        out[order[:short]] += 1
    elif short < 0:
        order = np.argsort(values - floors, kind="stable")
        for idx in order:
            if short == 0:
                break
            if out[idx] > 0:
                out[idx] -= 1
                short += 1
    return out
