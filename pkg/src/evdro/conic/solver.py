"""Operator-splitting conic solver on the homogeneous self-dual embedding.

The iteration is the one popularised by SCS: with ``u = (x, y, tau)`` and
``v = (r, s, kappa)``,

    u_tilde = (I + Q)^{-1} (u + v)
    u       = Pi_C(alpha * u_tilde + (1 - alpha) * u - v)
    v       = v - alpha * u_tilde - (1 - alpha) * u_prev + u

where ``Q`` is the skew-symmetric embedding matrix and ``C = R^n x K* x R_+``.
The linear system reduces to one solve with ``I + A^T A``, factored once.
Data are Ruiz-equilibrated (uniformly within non-separable cones); every
tolerance is measured on the original data.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cones import ConeLayout
from .program import ConicProgram

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal_infeasible"
DUAL_INFEASIBLE = "dual_infeasible"
MAX_ITER = "max_iter"

INFEASIBILITY_TOL = 1e-7
RUIZ_PASSES = 10
DENSE_MAX_COLS = 2000
DENSE_MAX_ENTRIES = 4_000_000
COLLAPSE_RATIO = 0.1


class SolverError(RuntimeError):
    pass


@dataclass
class ConicSolution:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    status: str
    objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    solve_time: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _equilibrate(A: sp.csr_matrix, layout: ConeLayout, passes: int = RUIZ_PASSES):
    m, n = A.shape
    d = np.ones(m)
    e = np.ones(n)
    M = A.tocsc(copy=True)
    groups = [sl for sl in layout.soc] + [sl for sl in layout.rsoc] + [sl for sl, _ in layout.psd]
    for _ in range(passes):
        absM = abs(M)
        row = np.sqrt(np.asarray(absM.max(axis=1).todense()).ravel()) if m else np.zeros(0)
        col = np.sqrt(np.asarray(absM.max(axis=0).todense()).ravel())
        for sl in groups:
            row[sl] = row[sl].max() if row[sl].size else 1.0
        row = np.where(row < 1e-4, 1.0, row)
        col = np.where(col < 1e-4, 1.0, col)
        dr = np.clip(1.0 / row, 1e-4, 1e4)
        dc = np.clip(1.0 / col, 1e-4, 1e4)
        M = sp.diags(dr) @ M @ sp.diags(dc)
        d *= dr
        e *= dc
    return sp.csc_matrix(M), d, e


class _Embedding:
    """Scaled problem data and the cached factorization of ``I + A^T A``."""

    def __init__(self, A, b, c, layout, scale):
        self.layout = layout
        self.m, self.n = A.shape
        Ah, self.D, self.E = _equilibrate(A, layout)
        bh = self.D * b
        ch = self.E * c
        nb = np.linalg.norm(bh)
        nc = np.linalg.norm(ch)
        self.sb = scale / nb if nb > 1e-12 else 1.0
        self.sc = scale / nc if nc > 1e-12 else 1.0
        self.A = Ah
        self.AT = sp.csc_matrix(Ah.T)
        self.b = bh * self.sb
        self.c = ch * self.sc
        K = sp.identity(self.n, format="csc") + (self.AT @ self.A).tocsc()
        # small programs: dense products beat sparse kernels on call overhead
        self.dense = self.n <= DENSE_MAX_COLS and self.m * self.n <= DENSE_MAX_ENTRIES
        if self.dense:
            self.A = Ah.toarray()
            self.AT = np.ascontiguousarray(self.A.T)
            self.Kinv = np.linalg.inv(K.toarray())
        else:
            try:
                self.lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:  # pragma: no cover - I + A^T A is SPD
                raise SolverError(f"factorization failed: {exc}") from exc
        self.h = np.concatenate([self.c, self.b])
        self.g = self._solve_m(self.h)
        self.hg = 1.0 + self.h @ self.g

    def _solve_m(self, w):
        # [[I, A^T], [-A, I]] z = w
        wx = w[: self.n]
        wy = w[self.n:]
        rhs = wx - self.AT @ wy
        x = self.Kinv @ rhs if self.dense else self.lu.solve(rhs)
        y = wy + self.A @ x
        return np.concatenate([x, y])

    def solve_linear(self, w):
        z = self._solve_m(w[:-1])
        tau = (w[-1] + self.h @ z) / self.hg
        out = np.empty_like(w)
        out[:-1] = z - tau * self.g
        out[-1] = tau
        return out

    def project(self, u):
        out = u.copy()
        out[self.n:-1] = self.layout.project(u[self.n:-1], dual=True)
        out[-1] = max(u[-1], 0.0)
        return out

    def unscale(self, xh, yh, sh):
        return self.E * xh / self.sb, self.D * yh / self.sc, sh / self.D / self.sb


def _residuals(A, b, c, x, y, s):
    Ax = A @ x
    ATy = A.T @ y
    pres = np.linalg.norm(Ax + s - b, np.inf) if b.size else 0.0
    dres = np.linalg.norm(ATy + c, np.inf) if c.size else 0.0
    cx = float(c @ x)
    by = float(b @ y)
    pscale = max(np.linalg.norm(Ax, np.inf) if b.size else 0.0,
                 np.linalg.norm(s, np.inf) if b.size else 0.0,
                 np.linalg.norm(b, np.inf) if b.size else 0.0)
    dscale = max(np.linalg.norm(ATy, np.inf) if c.size else 0.0,
                 np.linalg.norm(c, np.inf) if c.size else 0.0)
    return pres, dres, abs(cx + by), pscale, dscale, cx, by


def _admm_step(emb, u, v, alpha):
    ut = emb.solve_linear(u + v)
    mix = alpha * ut + (1.0 - alpha) * u
    u_new = emb.project(mix - v)
    return u_new, v - mix + u_new


class _Anderson:
    """Type-II Anderson acceleration of a fixed-point map with a residual safeguard."""

    def __init__(self, dim, memory, safeguard=1.0, reg=1e-10):
        self.memory = memory
        self.safeguard = safeguard
        self.reg = reg
        self.dG = np.zeros((dim, memory))
        self.dF = np.zeros((dim, memory))
        self.gram = np.zeros((memory, memory))
        self.count = 0
        self.prev_g = None
        self.prev_f = None
        self.fallback = None
        self.fallback_norm = np.inf

    def reset(self):
        self.count = 0
        self.prev_g = None
        self.prev_f = None

    def update(self, z, g):
        f = g - z
        fn = np.linalg.norm(f)
        # last step was accelerated: reject it if the residual grew
        if self.fallback is not None and fn > self.safeguard * self.fallback_norm:
            out = self.fallback
            self.fallback = None
            self.reset()
            return out
        if self.prev_f is not None:
            col = self.count % self.memory
            self.dG[:, col] = g - self.prev_g
            self.dF[:, col] = f - self.prev_f
            self.count += 1
            k = min(self.count, self.memory)
            row = self.dF[:, :k].T @ self.dF[:, col]
            self.gram[col, :k] = row
            self.gram[:k, col] = row
        self.prev_g, self.prev_f = g, f
        k = min(self.count, self.memory)
        if k == 0:
            self.fallback = None
            return g
        F = self.dF[:, :k]
        M = self.gram[:k, :k].copy()
        M[np.diag_indices(k)] += self.reg * (np.trace(M) / k + 1e-30)
        try:
            gamma = np.linalg.solve(M, F.T @ f)
        except np.linalg.LinAlgError:
            self.reset()
            self.fallback = None
            return g
        out = g - self.dG[:, :k] @ gamma
        if not np.all(np.isfinite(out)):
            self.reset()
            self.fallback = None
            return g
        self.fallback = g
        self.fallback_norm = fn
        return out


def solve(program: ConicProgram, tol: float = 1e-6, max_iter: int = 100000, *,
          alpha: float = 1.0, scale: float = 1.0, check_every: int = 10,
          anderson: int = 20) -> ConicSolution:
    """Solve ``program`` to tolerance ``tol``.

    Termination requires, on the unscaled data,
    ``|Ax + s - b| <= tol (1 + max(|Ax|, |s|, |b|))``,
    ``|A^T y + c| <= tol (1 + max(|A^T y|, |c|))`` and
    ``|c^T x + b^T y| <= tol (1 + max(|c^T x|, |b^T y|))`` (infinity norms).
    """
    start = time.perf_counter()
    A, b, cones, _ = program.stack()
    c = program.c
    layout = ConeLayout(cones)
    m, n = A.shape
    emb = _Embedding(A, b, c, layout, scale)

    size = n + m + 1
    u = np.zeros(size)
    v = np.zeros(size)
    u[-1] = 1.0
    v[-1] = 1.0

    status = MAX_ITER
    best = None
    it = 0
    accel = _Anderson(2 * size, anderson) if anderson else None
    ref_norm = None
    for it in range(1, max_iter + 1):
        u_new, v_new = _admm_step(emb, u, v, alpha)
        # the plain step output has y and s in their cones; extrapolated points need not
        u_plain, v_plain = u_new, v_new
        if accel is not None:
            z = np.concatenate([u, v])
            g = np.concatenate([u_new, v_new])
            z_next = accel.update(z, g)
            # the map is positively homogeneous and u = v = 0 is a spurious fixed
            # point; lift the iterate back whenever extrapolation drifts towards it
            if ref_norm is None:
                ref_norm = np.linalg.norm(g)
            zn = np.linalg.norm(z_next)
            if zn < COLLAPSE_RATIO * ref_norm:
                z_next = z_next * (ref_norm / max(zn, 1e-300))
            u_new, v_new = z_next[:size], z_next[size:]
        u, v = u_new, v_new

        if it % check_every and it != max_iter:
            continue
        tau, kappa = u_plain[-1], v_plain[-1]
        if tau > 1e-12 * max(1.0, kappa):
            x, y, s = emb.unscale(u_plain[:n] / tau, u_plain[n:-1] / tau, v_plain[n:-1] / tau)
            pres, dres, gap, pscale, dscale, cx, by = _residuals(A, b, c, x, y, s)
            ok = (pres <= tol * (1 + pscale) and dres <= tol * (1 + dscale)
                  and gap <= tol * (1 + max(abs(cx), abs(by))))
            best = (x, y, s, pres, dres, gap)
            if ok:
                status = OPTIMAL
                break
        # certificates, on unscaled data
        xr, yr, sr = emb.unscale(u_plain[:n], u_plain[n:-1], v_plain[n:-1])
        by = float(b @ yr)
        if by < 0:
            if np.linalg.norm(A.T @ yr, np.inf) / -by < INFEASIBILITY_TOL:
                status = PRIMAL_INFEASIBLE
                best = (np.full(n, np.nan), yr / -by, np.full(m, np.nan), np.inf, np.inf, np.inf)
                break
        cx = float(c @ xr)
        if cx < 0:
            if np.linalg.norm(A @ xr + sr, np.inf) / -cx < INFEASIBILITY_TOL:
                status = DUAL_INFEASIBLE
                best = (xr / -cx, np.full(m, np.nan), sr / -cx, np.inf, np.inf, np.inf)
                break

    if best is None:
        best = (np.full(n, np.nan), np.full(m, np.nan), np.full(m, np.nan), np.inf, np.inf, np.inf)
    x, y, s, pres, dres, gap = best
    obj = program.objective(x) if status in (OPTIMAL, MAX_ITER) else (
        np.inf if status == PRIMAL_INFEASIBLE else -np.inf)
    elapsed = time.perf_counter() - start
    log.debug("conic solve: status=%s iters=%d time=%.3fs", status, it, elapsed)
    return ConicSolution(x=x, y=y, s=s, status=status, objective=float(obj),
                         primal_residual=float(pres), dual_residual=float(dres), gap=float(gap),
                         iterations=it, solve_time=elapsed, info={"m": m, "n": n})


def verify_kkt(program: ConicProgram, solution: ConicSolution) -> dict:
    """Recompute optimality residuals from scratch (no solver internals)."""
    A, b, cones, _ = program.stack()
    layout = ConeLayout(cones)
    x, y, s = solution.x, solution.y, solution.s
    c = program.c
    pres, dres, gap, pscale, dscale, cx, by = _residuals(A, b, c, x, y, s)
    return {
        "primal_residual": float(pres),
        "dual_residual": float(dres),
        "gap": float(gap),
        "relative_primal_residual": float(pres / (1 + pscale)),
        "relative_dual_residual": float(dres / (1 + dscale)),
        "relative_gap": float(gap / (1 + max(abs(cx), abs(by)))),
        "complementarity": float(abs(s @ y)),
        "primal_cone_distance": layout.distance(s),
        "dual_cone_distance": layout.distance(y, dual=True),
    }
