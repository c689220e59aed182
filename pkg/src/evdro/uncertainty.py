"""Moment ambiguity sets and their nested-bootstrap estimation.

The set contains every distribution of z = z_hat + delta with

    E[delta]^T Sigma^{-1} E[delta] <= omega,    E[delta delta^T] <= gamma Sigma,

and (Sigma, omega, gamma) are estimated from prediction residuals by an
outer/inner bootstrap. Each outer replicate yields an upper percentile of
the inner omega/gamma draws plus a spread from re-bootstrapping those draws;
studentized pivots across replicates give confidence regions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from . import forecast as fc

log = logging.getLogger(__name__)

# absolute ridge floor, for residuals that are identically zero
RIDGE_FLOOR = 1e-12


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class MomentUncertaintySet:
    center: np.ndarray
    covariance: np.ndarray
    omega: float
    gamma: float

    def __post_init__(self):
        z = np.asarray(self.center, dtype=float).reshape(-1)
        S = np.asarray(self.covariance, dtype=float)
        if S.shape != (z.size, z.size):
            raise EstimationError(f"covariance shape {S.shape} does not match center length {z.size}")
        if np.abs(S - S.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(S).max(initial=0.0)):
            raise EstimationError("covariance is not symmetric")
        if self.omega < 0 or self.gamma <= 0:
            raise EstimationError("omega must be >= 0 and gamma > 0")
        object.__setattr__(self, "center", z)
        object.__setattr__(self, "covariance", 0.5 * (S + S.T))

    @property
    def dimension(self) -> int:
        return self.center.size

    def singleton(self) -> "MomentUncertaintySet":
        """The same center with omega = 0 and gamma = 1 (a point forecast)."""
        return MomentUncertaintySet(self.center, self.covariance, 0.0, 1.0)

    def recentered(self, center) -> "MomentUncertaintySet":
        return MomentUncertaintySet(center, self.covariance, self.omega, self.gamma)

    def contains(self, mean_delta, second_moment, tol: float = 1e-9) -> bool:
        """Membership test for the first two moments of delta."""
        mean_delta = np.asarray(mean_delta, dtype=float)
        first = compute_omega(mean_delta, self.covariance) <= self.omega + tol
        gap = self.gamma * self.covariance - np.asarray(second_moment, dtype=float)
        second = np.linalg.eigvalsh(0.5 * (gap + gap.T))[0] >= -tol
        return bool(first and second)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "covariance": self.covariance.tolist(),
                "omega": self.omega, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, data: dict) -> "MomentUncertaintySet":
        return cls(np.asarray(data["center"]), np.asarray(data["covariance"]),
                   float(data["omega"]), float(data["gamma"]))


def _cholesky(sigma: np.ndarray):
    try:
        return sla.cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("covariance is not positive definite") from exc


def compute_omega(mean_residual, sigma) -> float:
    """Mahalanobis form mean^T sigma^{-1} mean via a Cholesky solve."""
    mean_residual = np.asarray(mean_residual, dtype=float).reshape(-1)
    sigma = np.asarray(sigma, dtype=float)
    if not mean_residual.any():
        return 0.0
    factor = _cholesky(sigma)
    return max(float(mean_residual @ sla.cho_solve(factor, mean_residual)), 0.0)


def compute_gamma(sample_cov, sigma) -> float:
    """Smallest gamma with sample_cov <= gamma * sigma (largest generalized eigenvalue)."""
    A = np.asarray(sample_cov, dtype=float)
    B = np.asarray(sigma, dtype=float)
    for name, M in (("sample_cov", A), ("sigma", B)):
        if np.abs(M - M.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(M).max(initial=0.0)):
            raise EstimationError(f"{name} is not symmetric")
    try:
        vals = sla.eigh(0.5 * (A + A.T), 0.5 * (B + B.T), eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("sigma is not positive definite") from exc
    return float(vals[-1])


def empirical_quantile(values, p: float) -> float:
    """Order statistic at 1-based index ceil(p n); p = 0 maps to the minimum."""
    vals = np.sort(np.asarray(values, dtype=float).ravel())
    if vals.size == 0:
        raise EstimationError("quantile of an empty sample")
    if not 0.0 <= p <= 1.0:
        raise EstimationError("quantile level must lie in [0, 1]")
    k = max(1, math.ceil(p * vals.size - 1e-12))
    return float(vals[min(k, vals.size) - 1])


@dataclass(frozen=True)
class BootstrapConfig:
    outer: int = 8
    inner: int = 32
    studentize: int = 20
    resample_size: int = 100
    alpha: float = 0.25
    eta: float = 0.1
    ridge: float = 1e-8
    seed: int = 0
    upper_quantile: bool = True
    heldout: bool = False

    def __post_init__(self):
        if self.outer < 1 or self.inner < 2 or self.studentize < 2:
            raise EstimationError("need outer >= 1, inner >= 2, studentize >= 2")
        if not 0 < self.alpha < 1 or not 0 < self.eta < 1:
            raise EstimationError("alpha and eta must lie in (0, 1)")
        if self.ridge <= 0:
            raise EstimationError("ridge must be positive")

    @property
    def level(self) -> float:
        return 1.0 - self.alpha if self.upper_quantile else self.alpha


@dataclass
class EstimationReport:
    sigma_hat: np.ndarray
    omega_hat: float
    gamma_hat: float
    omega_region: tuple
    gamma_region: tuple
    per_outer: dict
    quantiles: dict
    config: dict
    seed: int
    flags: list = field(default_factory=list)

    @property
    def s_omega(self) -> float:
        return self.quantiles["omega"]["spread"]

    @property
    def s_gamma(self) -> float:
        return self.quantiles["gamma"]["spread"]

    def to_dict(self) -> dict:
        per_outer = dict(self.per_outer)
        per_outer["flags"] = list(self.flags)
        return {
            "sigma_hat": np.asarray(self.sigma_hat).tolist(),
            "omega_hat": self.omega_hat,
            "gamma_hat": self.gamma_hat,
            "omega_region": list(self.omega_region),
            "gamma_region": list(self.gamma_region),
            "per_outer": per_outer,
            "quantiles": self.quantiles,
            "config": self.config,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "EstimationReport":
        per_outer = dict(data["per_outer"])
        flags = per_outer.pop("flags", [])
        return cls(np.asarray(data["sigma_hat"], dtype=float), float(data["omega_hat"]), float(data["gamma_hat"]),
                   tuple(data["omega_region"]), tuple(data["gamma_region"]), per_outer,
                   data["quantiles"], data["config"], int(data["seed"]), flags)


def _rng(seed: int, *key: int) -> np.random.Generator:
    # independent stream per (phase, i, j) so loop order does not matter
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _ridge(cov: np.ndarray, rel: float) -> float:
    d = cov.shape[0]
    return rel * max(np.trace(cov), 0.0) / d + RIDGE_FLOOR


def _studentized_region(values, spreads, eta, flags, name):
    """Aggregate, spread, pivot quantiles and region for one parameter."""
    values = np.asarray(values)
    spreads = np.asarray(spreads)
    est = float(values.mean())
    spread = float(values.std(ddof=1)) if values.size > 1 else 0.0
    ok = spreads > 0
    if not ok.any() or spread == 0.0:
        flags.append(f"{name}: degenerate pivots, region collapsed to the point estimate")
        return est, spread, (est, est), (0.0, 0.0)
    if not ok.all():
        flags.append(f"{name}: {int((~ok).sum())} replicate(s) with zero spread excluded")
    pivots = (values[ok] - est) / spreads[ok]
    q_lo = empirical_quantile(pivots, eta / 2)
    q_hi = empirical_quantile(pivots, 1 - eta / 2)
    return est, spread, (est - spread * q_hi, est - spread * q_lo), (q_lo, q_hi)


def run_estimation(history, spec: fc.PredictorSpec, config: BootstrapConfig, horizon: int = 1) -> EstimationReport:
    """Nested bootstrap estimate of (Sigma, omega_alpha, gamma_alpha) and regions.

    ``history`` is a :class:`SeriesHistory` (cut into context/target windows)
    or a ready :class:`SampleSet`.
    """
    samples = history if isinstance(history, fc.SampleSet) else fc.make_samples(history, spec.context_length, horizon)
    n = len(samples)
    d = samples.flat_targets.shape[1]
    Nb = config.resample_size
    if Nb < d + 2:
        raise EstimationError(f"resample size {Nb} must be at least d + 2 = {d + 2}")
    A, B, C = config.outer, config.inner, config.studentize
    level = config.level

    # predictors without parameters give the same residual for a sample in any resample
    fixed = None
    if spec.kind != "ar" and not config.heldout:
        fixed = fc.residuals(fc.fit(spec, samples), samples)

    sig_outer = np.empty((A, d, d))
    om_outer = np.empty(A)
    ga_outer = np.empty(A)
    s_om = np.empty(A)
    s_ga = np.empty(A)
    flags: list[str] = []
    for i in range(A):
        means = np.empty((B, d))
        covs = np.empty((B, d, d))
        for j in range(B):
            rng = _rng(config.seed, 0, i, j)
            idx = rng.integers(0, n, size=Nb)
            if fixed is not None:
                res = fixed[idx]
            else:
                sub = samples.take(idx)
                train = sub
                if config.heldout:
                    oob = np.setdiff1d(np.arange(n), idx)
                    train = samples.take(oob) if oob.size >= spec.context_length + 2 else sub
                res = fc.residuals(fc.fit(spec, train), sub)
            means[j] = res.mean(axis=0)
            cov = np.atleast_2d(np.cov(res, rowvar=False, ddof=1))
            covs[j] = cov + _ridge(cov, config.ridge) * np.eye(d)
        sigma_i = covs.mean(axis=0)
        factor = _cholesky(sigma_i)
        omegas = np.einsum("bd,bd->b", means, sla.cho_solve(factor, means.T).T)
        omegas = np.maximum(omegas, 0.0)
        L = factor[0]
        # gamma_j = lambda_max(L^{-1} S_j L^{-T})
        gammas = np.empty(B)
        for j in range(B):
            W = sla.solve_triangular(L, covs[j], lower=True)
            M = sla.solve_triangular(L, W.T, lower=True)
            gammas[j] = np.linalg.eigvalsh(0.5 * (M + M.T))[-1]
        sig_outer[i] = sigma_i
        om_outer[i] = empirical_quantile(omegas, level)
        ga_outer[i] = empirical_quantile(gammas, level)
        # re-bootstrap the inner draws to get the spread of each percentile
        om_re = np.empty(C)
        ga_re = np.empty(C)
        for k in range(C):
            pick = _rng(config.seed, 1, i, k).integers(0, B, size=B)
            om_re[k] = empirical_quantile(omegas[pick], level)
            ga_re[k] = empirical_quantile(gammas[pick], level)
        s_om[i] = om_re.std(ddof=1)
        s_ga[i] = ga_re.std(ddof=1)

    omega_hat, sw, om_reg, om_q = _studentized_region(om_outer, s_om, config.eta, flags, "omega")
    gamma_hat, sg, ga_reg, ga_q = _studentized_region(ga_outer, s_ga, config.eta, flags, "gamma")
    om_reg = (max(om_reg[0], 0.0), max(om_reg[1], 0.0))
    for msg in flags:
        log.warning(msg)
    return EstimationReport(
        sigma_hat=sig_outer.mean(axis=0),
        omega_hat=omega_hat,
        gamma_hat=gamma_hat,
        omega_region=om_reg,
        gamma_region=ga_reg,
        per_outer={"omega": om_outer.tolist(), "gamma": ga_outer.tolist(),
                   "s_omega": s_om.tolist(), "s_gamma": s_ga.tolist()},
        quantiles={"omega": {"low": om_q[0], "high": om_q[1], "spread": sw},
                   "gamma": {"low": ga_q[0], "high": ga_q[1], "spread": sg}},
        config=dict(asdict(config), predictor=spec.label(), horizon=horizon),
        seed=config.seed,
        flags=flags,
    )


def build_uncertainty_set(report: EstimationReport, center, conservative: bool = False) -> MomentUncertaintySet:
    """Ambiguity set around ``center``; ``conservative`` uses the region upper ends."""
    omega = report.omega_region[1] if conservative else report.omega_hat
    gamma = report.gamma_region[1] if conservative else report.gamma_hat
    center = center.point if isinstance(center, fc.Forecast) else center
    return MomentUncertaintySet(np.asarray(center, dtype=float), report.sigma_hat, max(omega, 0.0), gamma)
