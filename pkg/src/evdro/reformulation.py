"""Conic reformulation of the distributionally robust balancing problem.

Three program modes share the same feasible region over dispatch and fleet
variables and differ in how the uncertain charging-supply term
``theta * sum_k sum_{i in sigma} c_i^k z_i^k`` enters the objective:

* ``counterpart``: its worst-case expectation in closed form, one SOC row;
* ``theorem1``: a worst-case expectation block (Q, q, v, t) with an LMI and
  an SOC row, whose minimum equals the same supremum;
* ``non_robust``: point forecasts (singleton ambiguity sets).

Fleet dynamics stay primal equality rows with the pessimistic supply
c_lo; demand enters through extremal means r_lo / r_hi in the ratio rows.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import conic
from .conic import NONNEG, RSOC, SOC, ZERO, Expr, ProgramBuilder
from .model import (BalancingDecision, CityModel, FleetState, ModelError, TransitionKernel,
                    compute_ratio_bounds, net_inflow)
from .uncertainty import MomentUncertaintySet

log = logging.getLogger(__name__)

COUNTERPART = "counterpart"
THEOREM1 = "theorem1"
NON_ROBUST = "non_robust"
MODES = (COUNTERPART, THEOREM1, NON_ROBUST)

RELAX_WEIGHT = 1e3
CUT_TOL = 1e-6
MAX_CUT_ROUNDS = 60
RELAX_TOL = 1e-4
RATIO_MARGIN = 1e-2


class InfeasibleProgram(RuntimeError):
    pass


def normalize_mode(mode: str) -> str:
    mode = mode.replace("-", "_")
    if mode == "theorem1_block":
        mode = THEOREM1
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return mode


def effective_radius(uset: MomentUncertaintySet) -> float:
    """Squared radius of the attainable mean shifts.

    A mean shift mu with E[delta delta^T] <= gamma Sigma obeys
    mu mu^T <= gamma Sigma, so mu^T Sigma^{-1} mu <= gamma as well.
    """
    return min(uset.omega, uset.gamma)


def _sqrt_cov(cov: np.ndarray) -> np.ndarray:
    """Factor L with L L^T = cov (Cholesky, eigen fallback for semidefinite input)."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        return V * np.sqrt(np.maximum(w, 0.0))


def worst_case_linear_expectation(a, b: float, uset: MomentUncertaintySet) -> float:
    """Supremum of E[a^T z + b] over the moment ambiguity set."""
    a = np.asarray(a, dtype=float)
    L = _sqrt_cov(uset.covariance)
    return float(b + a @ uset.center + math.sqrt(effective_radius(uset)) * np.linalg.norm(L.T @ a))


def worst_case_component_bounds(uset: MomentUncertaintySet) -> tuple[np.ndarray, np.ndarray]:
    """Extreme component means over the set, with the lower end floored at 0."""
    half = np.sqrt(effective_radius(uset) * np.clip(np.diag(uset.covariance), 0.0, None))
    return np.maximum(uset.center - half, 0.0), uset.center + half


@dataclass
class WorstCaseBlock:
    """Variable indices of one worst-case expectation block."""

    Q: np.ndarray
    q: np.ndarray
    v: np.ndarray
    t: np.ndarray
    objective: Expr


def build_worst_case_block(builder: ProgramBuilder, name: str, a_exprs, b: float,
                           uset: MomentUncertaintySet) -> WorstCaseBlock:
    """Add a block whose minimal ``v + t + b`` is the sup of E[a^T z + b].

    ``a_exprs`` are affine expressions (or numbers) for the cost vector a.
    Rows: [[v, (a - q)^T / 2], [(a - q) / 2, Q]] >= 0 (which also forces
    Q >= 0), v >= 0, and
    t - (gamma Sigma + z z^T) . Q - z^T q >= sqrt(omega) |L^T (q + 2 Q z)|.
    """
    d = uset.dimension
    a = [e if isinstance(e, Expr) else Expr.constant(float(e)) for e in a_exprs]
    if len(a) != d:
        raise ValueError(f"cost vector has {len(a)} entries, set dimension is {d}")
    z = uset.center
    Sigma = uset.covariance
    L = _sqrt_cov(Sigma)
    tri = builder.add_variable(f"{name}.Q", (d * (d + 1) // 2,))
    rows_, cols_ = np.tril_indices(d)
    Q = np.empty((d, d), dtype=int)
    Q[rows_, cols_] = tri
    Q[cols_, rows_] = tri
    q = builder.add_variable(f"{name}.q", (d,))
    v = builder.add_variable(f"{name}.v")
    t = builder.add_variable(f"{name}.t")

    def Qe(i, j):
        return Expr.var(Q[i, j])

    mat = [[None] * (d + 1) for _ in range(d + 1)]
    mat[0][0] = Expr.var(v)
    for i in range(d):
        mat[i + 1][0] = (a[i] - Expr.var(q[i])) * 0.5
        for j in range(i + 1):
            mat[i + 1][j + 1] = Qe(i, j)
    builder.add_psd(f"{name}.lmi", mat)
    builder.add_constraint(f"{name}.v_nonneg", NONNEG, [Expr.var(v)])

    M = uset.gamma * Sigma + np.outer(z, z)
    lin = Expr.var(t)
    for i in range(d):
        lin.iadd(Expr.var(q[i]), -z[i])
        lin.iadd(Expr.var(Q[i, i]), -M[i, i])
        for j in range(i):
            lin.iadd(Expr.var(Q[i, j]), -2.0 * M[i, j])
    # w = q + 2 Q z
    w = []
    for i in range(d):
        e = Expr.var(q[i])
        for j in range(d):
            e.iadd(Qe(i, j), 2.0 * z[j])
        w.append(e)
    root = math.sqrt(uset.omega)
    rows = [lin]
    for col in range(d):
        e = Expr()
        for i in range(d):
            if L[i, col] != 0.0:
                e.iadd(w[i], root * L[i, col])
        rows.append(e)
    builder.add_constraint(f"{name}.t_soc", SOC, rows)
    obj = Expr.var(v) + Expr.var(t) + b
    return WorstCaseBlock(Q, q, v, t, obj)


def hyperbolic_constraint(builder: ProgramBuilder, name: str, z_var: int, T_expr: Expr, a: float,
                          cut_points=()) -> None:
    """z >= T^(-a): exact rotated SOC for a = 1, tangent cuts otherwise."""
    if a <= 0:
        raise ValueError("power a must be positive")
    if a == 1.0:
        # 2 * z * T >= (sqrt 2)^2
        builder.add_constraint(name, RSOC, [Expr.var(z_var), T_expr, Expr.constant(math.sqrt(2.0))])
        return
    rows = []
    for T0 in cut_points:
        f0 = T0 ** (-a)
        g0 = -a * T0 ** (-a - 1)
        # z - f0 - g0 (T - T0) >= 0
        rows.append(Expr.var(z_var) - T_expr * g0 - (f0 - g0 * T0))
    builder.add_constraint(name, NONNEG, rows)


def recover_slacks(S, r_hi, r_lo, lower, upper, tol: float = 1e-8):
    """Slack pair D = sqrt(r_lo - l S), U = sqrt(h S - r_hi)."""
    S = np.asarray(S, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float).reshape(S.shape[0], -1), S.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float).reshape(S.shape[0], -1), S.shape)
    rad_d = np.where(np.isfinite(lower), np.asarray(r_lo) - lower * S, np.inf)
    rad_u = np.where(np.isfinite(upper), upper * S - np.asarray(r_hi), np.inf)
    scale = 1.0 + np.abs(S) * np.where(np.isfinite(upper), np.abs(upper), 0.0) + np.abs(r_hi)
    if np.any(rad_d < -tol * scale) or np.any(rad_u < -tol * scale):
        raise ModelError("ratio row violated: negative slack radicand")
    return np.sqrt(np.maximum(rad_d, 0.0)), np.sqrt(np.maximum(rad_u, 0.0))


@dataclass
class BalancingSolution:
    decision: BalancingDecision
    objective: float
    status: str
    mode: str
    S: np.ndarray
    T: np.ndarray
    V: np.ndarray
    O: np.ndarray
    L: np.ndarray
    z: np.ndarray
    D: np.ndarray
    U: np.ndarray
    r_hi: np.ndarray
    r_lo: np.ndarray
    c_lo: np.ndarray
    ratio_lower: np.ndarray
    ratio_upper: np.ndarray
    relaxation: float = 0.0
    cut_rounds: int = 0
    solve_time: float = 0.0
    iterations: int = 0
    kkt: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == conic.OPTIMAL


@dataclass
class ProgramIndex:
    """Where each model quantity lives in the conic program."""

    x_arcs: np.ndarray       # (n_arcs, 2) origin/destination of vacant arcs
    y_arcs: np.ndarray
    x: np.ndarray            # (tau, n_arcs) variable indices
    y: np.ndarray
    S: np.ndarray            # (tau, N)
    V: np.ndarray            # (tau, N); row 0 fixed by the state
    O: np.ndarray
    L: np.ndarray
    z: np.ndarray            # (tau, |sigma|)
    relax_lo: np.ndarray = None
    relax_hi: np.ndarray = None
    blocks: dict = field(default_factory=dict)


class BalancingProblem:
    """One receding-horizon balancing instance.

    ``demand_set`` and ``supply_set`` are moment sets over the flattened
    (interval-major) demand r and charging supply c for the next ``horizon``
    intervals.
    """

    def __init__(self, city: CityModel, kernel: TransitionKernel, state: FleetState,
                 demand_set: MomentUncertaintySet, supply_set: MomentUncertaintySet,
                 mode: str = COUNTERPART, start_interval: int = 0, history_S=None, history_r=None):
        self.city = city
        self.history_S = None if history_S is None else np.atleast_2d(np.asarray(history_S, dtype=float))
        self.history_r = None if history_r is None else np.atleast_2d(np.asarray(history_r, dtype=float))
        self.kernel = kernel
        self.state = state
        self.mode = normalize_mode(mode)
        N, tau = city.n_regions, city.horizon
        d = N * tau
        if demand_set.dimension != d or supply_set.dimension != d:
            raise ModelError(f"ambiguity sets must have dimension N * tau = {d}")
        if state.vacant.shape != (N,) or kernel.n_regions != N:
            raise ModelError("state/kernel dimensions do not match the city")
        kernel.validate()
        if self.mode == NON_ROBUST:
            demand_set = demand_set.singleton()
            supply_set = supply_set.singleton()
        self.demand_set = demand_set
        self.supply_set = supply_set
        self.start_interval = start_interval
        r_lo, r_hi = worst_case_component_bounds(demand_set)
        c_lo, _ = worst_case_component_bounds(supply_set)
        self.r_lo = r_lo.reshape(tau, N)
        self.r_hi = r_hi.reshape(tau, N)
        self.c_lo = c_lo.reshape(tau, N)
        self._check_charging_reachable()

    # -- instance facts -------------------------------------------------
    @property
    def fleet_size(self) -> float:
        return self.state.total

    def _check_charging_reachable(self):
        """Find the stations that can meet the charging floor in the first interval.

        A station is served when low-battery vehicles outside the stations can
        reach it, directly or relayed through a served station that holds some.
        Unserved stations drop the floor and their charging term for that
        interval; with no served station at all the program is rejected.
        """
        city = self.city
        sigma = city.sigma_mask
        arcs = city.lowbatt_arcs
        L0 = self.state.lowbatt
        src = (~sigma) & (L0 > 0)
        served = arcs[src].any(axis=0) & sigma
        while True:
            relay = served & (L0 > 0)
            grown = served | (arcs[relay].any(axis=0) & sigma)
            if np.array_equal(grown, served):
                break
            served = grown
        if not served.any() or L0[src].sum() + 1e-12 < city.t_floor * served.sum():
            raise ModelError("t_floor unreachable: not enough low-battery vehicles can reach every charging region")
        self.served_first = served[list(city.charging_regions)]
        if not self.served_first.all():
            log.info("stations %s cannot be reached this interval",
                     [i for i, ok in zip(city.charging_regions, self.served_first) if not ok])

    def no_balancing_supply(self) -> np.ndarray:
        """Post-balancing supply S when nothing is dispatched, shape (tau, N)."""
        N, tau = self.city.n_regions, self.city.horizon
        S = np.empty((tau, N))
        V, O = self.state.vacant.copy(), self.state.occupied.copy()
        for k in range(tau):
            S[k] = V
            kern = self.kernel.at(self.start_interval + k)
            V, O = (kern.P_v[0].T @ V + kern.Q_v[0].T @ O + self.c_lo[k],
                    kern.P_o[0].T @ V + kern.Q_o[0].T @ O)
        return S

    def global_bounds(self):
        """Per-interval min/max demand-to-supply ratios.

        Taken from the supplied history when present, otherwise from the
        no-balancing trajectory under the extremal demand means (which is
        feasible for them by construction).
        """
        if self.history_S is not None:
            return compute_ratio_bounds(self.history_S, self.history_r, False)
        return compute_ratio_bounds(self.no_balancing_supply(), self.r_lo, False, history_r_upper=self.r_hi)

    # -- program construction ------------------------------------------
    def build(self, lower=None, upper=None, *, relax: bool = False, cut_points=None,
              violation_only: bool = False):
        city = self.city
        N, tau = city.n_regions, city.horizon
        sigma = list(city.charging_regions)
        theta = city.fairness_weight
        a = city.fairness_power
        if lower is None:
            lower = city.ratio_lower
        if upper is None:
            upper = city.ratio_upper
        lower = np.full((tau, N), -np.inf) if lower is None else np.broadcast_to(
            np.asarray(lower, dtype=float).reshape(tau, -1), (tau, N))
        upper = np.full((tau, N), np.inf) if upper is None else np.broadcast_to(
            np.asarray(upper, dtype=float).reshape(tau, -1), (tau, N))

        bld = ProgramBuilder()
        x_arcs = np.argwhere(city.vacant_arcs)
        y_arcs = np.argwhere(city.lowbatt_arcs)
        x = bld.add_variable("x", (tau, len(x_arcs))) if len(x_arcs) else np.zeros((tau, 0), dtype=int)
        y = bld.add_variable("y", (tau, len(y_arcs))) if len(y_arcs) else np.zeros((tau, 0), dtype=int)
        S = bld.add_variable("S", (tau, N))
        V = bld.add_variable("V", (tau, N))
        O = bld.add_variable("O", (tau, N))
        L = bld.add_variable("L", (tau, N))
        z = bld.add_variable("z", (tau, len(sigma)))

        def net(var, arcs, k):
            """Net inflow per region and outflow per region as expressions."""
            inflow = [Expr() for _ in range(N)]
            outflow = [Expr() for _ in range(N)]
            for col, (i, j) in enumerate(arcs):
                outflow[i].iadd(Expr.var(var[k, col]))
                inflow[j].iadd(Expr.var(var[k, col]))
            return [inflow[i] - outflow[i] for i in range(N)], outflow

        nonneg = []
        eq = []
        for k in range(tau):
            # decision variables and fleet counts are nonnegative
            nonneg += [Expr.var(i) for i in np.ravel(x[k])] + [Expr.var(i) for i in np.ravel(y[k])]
            nonneg += [Expr.var(i) for i in S[k]] + [Expr.var(i) for i in V[k]]
            nonneg += [Expr.var(i) for i in O[k]] + [Expr.var(i) for i in L[k]]
        bld.add_constraint("nonneg", NONNEG, nonneg)

        for i in range(N):
            eq.append(Expr.var(V[0, i]) - self.state.vacant[i])
            eq.append(Expr.var(O[0, i]) - self.state.occupied[i])
            eq.append(Expr.var(L[0, i]) - self.state.lowbatt[i])
        outflow_rows = []
        T_exprs = []
        objective = Expr()
        Wv = city.vacant_cost
        Wl = city.lowbatt_cost
        beta = city.charge_weight
        for k in range(tau):
            kern = self.kernel.at(self.start_interval + k)
            nx, ox = net(x, x_arcs, k)
            ny, oy = net(y, y_arcs, k)
            for i in range(N):
                eq.append(Expr.var(S[k, i]) - nx[i] - Expr.var(V[k, i]))
                outflow_rows.append(Expr.var(V[k, i]) - ox[i])
                outflow_rows.append(Expr.var(L[k, i]) - oy[i])
            T_exprs.append([ny[i] for i in sigma])
            if k + 1 < tau:
                Pv, Po, Pl, Qv, Qo = kern.P_v[0], kern.P_o[0], kern.P_l[0], kern.Q_v[0], kern.Q_o[0]
                for i in range(N):
                    ev = Expr.var(V[k + 1, i]) - Expr.dot(S[k], Pv[:, i]) - Expr.dot(O[k], Qv[:, i])
                    eq.append(ev - self.c_lo[k, i])
                    eq.append(Expr.var(O[k + 1, i]) - Expr.dot(S[k], Po[:, i]) - Expr.dot(O[k], Qo[:, i]))
                    eq.append(Expr.var(L[k + 1, i]) - ny[i] - Expr.dot(S[k], Pl[:, i]))
            if violation_only:
                continue
            for col, (i, j) in enumerate(x_arcs):
                objective.iadd(Expr.var(x[k, col]), Wv[i, j])
            for col, (i, j) in enumerate(y_arcs):
                objective.iadd(Expr.var(y[k, col]), beta * Wl[i, j])
        bld.add_constraint("dynamics", ZERO, eq)
        bld.add_constraint("outflow", NONNEG, outflow_rows)
        floor_rows = []
        for k, Tk in enumerate(T_exprs):
            for s, T in enumerate(Tk):
                served = k > 0 or self.served_first[s]
                floor_rows.append(T - city.t_floor if served else T)
        bld.add_constraint("t_floor", NONNEG, floor_rows)

        # mobility ratio rows: h S - r_hi >= 0 and r_lo - l S >= 0
        hi_rows, lo_rows = [], []
        hi_pos, lo_pos = [], []
        for k in range(tau):
            for i in range(N):
                if np.isfinite(upper[k, i]):
                    hi_rows.append(Expr.var(S[k, i]) * upper[k, i] - self.r_hi[k, i])
                    hi_pos.append((k, i))
                if np.isfinite(lower[k, i]):
                    lo_rows.append(self.r_lo[k, i] - Expr.var(S[k, i]) * lower[k, i])
                    lo_pos.append((k, i))
        relax_hi = relax_lo = None
        if relax or violation_only:
            relax_hi = bld.add_variable("relax_hi", (len(hi_rows),)) if hi_rows else np.zeros(0, dtype=int)
            relax_lo = bld.add_variable("relax_lo", (len(lo_rows),)) if lo_rows else np.zeros(0, dtype=int)
            for rows, pen in ((hi_rows, relax_hi), (lo_rows, relax_lo)):
                for r, p in zip(rows, pen):
                    r.iadd(Expr.var(p))
                    objective.iadd(Expr.var(p), 1.0 if violation_only else RELAX_WEIGHT * theta)
                bld.add_constraint("relax_nonneg", NONNEG, [Expr.var(p) for p in pen])
        bld.add_constraint("ratio_upper", NONNEG, hi_rows)
        bld.add_constraint("ratio_lower", NONNEG, lo_rows)

        # charging epigraphs z >= T^(-a); an epigraph whose z carries no weight
        # leaves z unbounded above and stalls the solver, so that z is pinned to 0
        if a != 1.0 and cut_points is None:
            cut_points = self.initial_cuts()
        idle = np.ones((tau, len(sigma)), dtype=bool) if violation_only else self.idle_charging()
        pinned = []
        for k in range(tau):
            for s, i in enumerate(sigma):
                if idle[k, s]:
                    pinned.append(Expr.var(z[k, s]))
                    continue
                pts = () if a == 1.0 else cut_points[k][s]
                hyperbolic_constraint(bld, f"charge[{k},{i}]", z[k, s], T_exprs[k][s], a, pts)
        if pinned:
            bld.add_constraint("idle_charge", ZERO, pinned)

        blocks = {}
        sig_flat = np.array([k * N + i for k in range(tau) for i in sigma])
        z_flat = np.array([z[k, s] for k in range(tau) for s in range(len(sigma))])
        cset = self.supply_set
        if violation_only:
            pass
        elif self.mode == THEOREM1:
            d = N * tau
            a_exprs = [Expr() for _ in range(d)]
            for pos, var in zip(sig_flat, z_flat):
                a_exprs[pos] = Expr.var(var, theta)
            blk = build_worst_case_block(bld, "supply_block", a_exprs, 0.0, cset)
            objective.iadd(blk.objective)
            blocks["supply"] = blk
            # demand block: its cost vector is zero once dynamics stay primal
            blk = build_worst_case_block(bld, "demand_block", [0.0] * d, 0.0, self.demand_set)
            objective.iadd(blk.objective)
            blocks["demand"] = blk
        else:
            objective.iadd(Expr.dot(z_flat, theta * cset.center[sig_flat]))
            rho = effective_radius(cset)
            if rho > 0:
                Ls = _sqrt_cov(cset.covariance[np.ix_(sig_flat, sig_flat)])
                u = bld.add_variable("charge_norm")
                rows = [Expr.var(u)]
                for col in range(Ls.shape[1]):
                    rows.append(Expr.dot(z_flat, Ls[:, col]))
                bld.add_constraint("charge_soc", SOC, rows)
                objective.iadd(Expr.var(u), theta * math.sqrt(rho))
        bld.add_objective(objective)
        program = bld.build()
        index = ProgramIndex(x_arcs, y_arcs, x, y, S, V, O, L, z, relax_lo, relax_hi, blocks)
        return program, index

    def idle_charging(self) -> np.ndarray:
        """Mask of charging epigraphs whose z has zero weight in the objective.

        That is the case for stations unreachable in the first interval and,
        outside the theorem mode, wherever the supply set is a point with a
        zero centre.
        """
        city = self.city
        sigma = list(city.charging_regions)
        shape = (city.horizon, len(sigma))
        idle = np.zeros(shape, dtype=bool)
        idle[0] = ~self.served_first
        cset = self.supply_set
        if self.mode == THEOREM1 or effective_radius(cset) > 0:
            return idle
        weight = city.fairness_weight * cset.center.reshape(city.horizon, city.n_regions)[:, sigma]
        return idle | (weight == 0)

    def initial_cuts(self, n_points: int = 12):
        city = self.city
        t_max = max(self.fleet_size, 2 * city.t_floor)
        # cuts near t_floor have slopes of order t_floor^(-a-1) and wreck the
        # conditioning; start at one vehicle and let refinement go lower if needed
        t_min = min(max(city.t_floor, 1.0), 0.5 * t_max)
        grid = np.geomspace(t_min, t_max, n_points)
        return [[list(grid) for _ in city.charging_regions] for _ in range(city.horizon)]

    # -- solving --------------------------------------------------------
    def _solve_once(self, lower, upper, relax, tol, cut_points=None, violation_only=False):
        program, index = self.build(lower, upper, relax=relax, cut_points=cut_points, violation_only=violation_only)
        sol = conic.solve(program, tol=tol)
        return program, index, sol

    def _solve_with_cuts(self, lower, upper, relax, tol):
        """Solve, refining tangent cuts for a != 1 until violation <= CUT_TOL.

        The target is never set below ten times the solver tolerance, the
        level at which the incumbent itself is only known.
        """
        cut_tol = max(CUT_TOL, 10 * tol)
        a = self.city.fairness_power
        cuts = None if a == 1.0 else self.initial_cuts()
        rounds = 0
        while True:
            program, index, sol = self._solve_once(lower, upper, relax, tol, cuts)
            rounds += 1
            if a == 1.0 or not sol.optimal:
                return program, index, sol, rounds
            T = self._T_values(sol.x, index)
            zv = sol.x[index.z]
            viol = np.where(self.idle_charging(), 0.0, np.maximum(T, self.city.t_floor) ** (-a) - zv)
            if viol.max() <= cut_tol or rounds >= MAX_CUT_ROUNDS:
                if viol.max() > cut_tol:
                    log.warning("cut loop stopped at violation %.3g", viol.max())
                return program, index, sol, rounds
            for k in range(self.city.horizon):
                for s in range(len(self.city.charging_regions)):
                    if viol[k, s] > cut_tol:
                        cuts[k][s].append(max(T[k, s], self.city.t_floor))

    def _T_values(self, x, index):
        tau, N = self.city.horizon, self.city.n_regions
        sigma = list(self.city.charging_regions)
        out = np.empty((tau, len(sigma)))
        for k in range(tau):
            Y = np.zeros((N, N))
            Y[index.y_arcs[:, 0], index.y_arcs[:, 1]] = x[index.y[k]] if index.y.size else 0.0
            out[k] = net_inflow(Y)[sigma]
        return out

    def tightened_bounds(self, tol: float = 1e-6):
        """Global ratio bounds, widened where the relaxed plan cannot meet them."""
        def solve_relaxed(lo, hi):
            # the plan only shapes the bounds, so a looser tolerance suffices.
            # When the global bounds cannot be met, the plan minimizing the total
            # violation is used: with penalty weight 1e3 the weighted program
            # chases the same plan but is too ill-conditioned for the solver
            loose = max(tol, RELAX_TOL)
            _, index, sol, _ = self._solve_with_cuts(lo, hi, False, loose)
            if sol.status == conic.PRIMAL_INFEASIBLE or not sol.optimal:
                _, index, sol = self._solve_once(lo, hi, True, loose, violation_only=True)
            if not sol.optimal:
                raise InfeasibleProgram(f"relaxed bound solve ended with status {sol.status}")
            return sol.x[index.S], self.r_lo, self.r_hi

        if self.history_S is not None:
            return compute_ratio_bounds(self.history_S, self.history_r, True, solve_relaxed=solve_relaxed)
        return compute_ratio_bounds(self.no_balancing_supply(), self.r_lo, True, history_r_upper=self.r_hi,
                                    solve_relaxed=solve_relaxed)

    def solve(self, lower=None, upper=None, *, tol: float = 1e-6, tighten: bool = True,
              allow_relax: bool = True) -> BalancingSolution:
        """Solve with user bounds, the city's bounds, or computed (tightened) bounds."""
        start = time.perf_counter()
        if lower is None and upper is None:
            lower, upper = self.city.ratio_lower, self.city.ratio_upper
        if lower is None and upper is None:
            lower, upper = self.tightened_bounds(tol) if tighten else self.global_bounds()
            # computed bounds are attained by a plan, so rows bind there and the
            # program has no strictly feasible point; a small widening restores one
            lower, upper = lower * (1.0 - RATIO_MARGIN), upper * (1.0 + RATIO_MARGIN)
        program, index, sol, rounds = self._solve_with_cuts(lower, upper, False, tol)
        relaxation = 0.0
        if sol.status == conic.PRIMAL_INFEASIBLE and allow_relax:
            log.warning("ratio bounds infeasible; re-solving with an L1 relaxation")
            program, index, sol, rounds = self._solve_with_cuts(lower, upper, True, tol)
            if sol.optimal:
                relaxation = float(sol.x[index.relax_lo].sum() + sol.x[index.relax_hi].sum())
        if sol.status == conic.PRIMAL_INFEASIBLE:
            raise InfeasibleProgram("balancing program is infeasible")
        result = self._package(program, index, sol, lower, upper, relaxation, rounds, tol)
        result.solve_time = time.perf_counter() - start
        return result

    def _package(self, program, index, sol, lower, upper, relaxation, rounds, tol=1e-6):
        city = self.city
        N, tau = city.n_regions, city.horizon
        x = np.nan_to_num(sol.x) if sol.x is not None else np.zeros(program.n)
        X = np.zeros((tau, N, N))
        Y = np.zeros((tau, N, N))
        for k in range(tau):
            if index.x.size:
                X[k, index.x_arcs[:, 0], index.x_arcs[:, 1]] = np.maximum(x[index.x[k]], 0.0)
            if index.y.size:
                Y[k, index.y_arcs[:, 0], index.y_arcs[:, 1]] = np.maximum(x[index.y[k]], 0.0)
        S = x[index.S]
        T = np.zeros((tau, N))
        for k in range(tau):
            T[k, list(city.charging_regions)] = net_inflow(Y[k])[list(city.charging_regions)]
        lo = np.broadcast_to(np.asarray(lower if lower is not None else -np.inf, dtype=float).reshape(tau, -1), (tau, N))
        hi = np.broadcast_to(np.asarray(upper if upper is not None else np.inf, dtype=float).reshape(tau, -1), (tau, N))
        if sol.optimal and relaxation <= 1e-6:
            D, U = recover_slacks(S, self.r_hi, self.r_lo, lo, hi, tol=max(1e-5, 10 * tol))
        else:
            D = U = np.full((tau, N), np.nan)
        kkt = conic.verify_kkt(program, sol) if sol.optimal else {}
        decision = BalancingDecision(X, Y, post_supply=S, net_charging_inflow=T)
        return BalancingSolution(
            decision=decision, objective=sol.objective, status=sol.status, mode=self.mode,
            S=S, T=T, V=x[index.V], O=x[index.O], L=x[index.L], z=x[index.z], D=D, U=U,
            r_hi=self.r_hi, r_lo=self.r_lo, c_lo=self.c_lo, ratio_lower=np.array(lo), ratio_upper=np.array(hi),
            relaxation=relaxation, cut_rounds=rounds, iterations=sol.iterations, kkt=kkt)


def build_balancing_program(city, kernel, state, demand_set, supply_set, mode=COUNTERPART,
                            lower=None, upper=None, start_interval: int = 0):
    """Program and variable map for fixed ratio bounds (no cut refinement)."""
    prob = BalancingProblem(city, kernel, state, demand_set, supply_set, mode, start_interval)
    return prob.build(lower, upper)
