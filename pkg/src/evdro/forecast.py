"""Point predictors for demand and supply series.

A predictor maps a context window of past observations (rows = time,
columns = regions) to a forecast over the next ``horizon`` intervals. The
forecast is flattened interval-major, so entry ``k * N + i`` is region i at
step k; this matches the ordering used by the uncertainty sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("persistence", "seasonal_naive", "moving_average", "ar")
RIDGE = 1e-6


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesHistory:
    observations: np.ndarray
    role: str = "demand"
    interval_minutes: int = 60

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2:
            raise ForecastError("observations must be a (time, regions) matrix")
        if np.any(obs < 0) or not np.all(np.isfinite(obs)):
            raise ForecastError("observations must be finite and nonnegative")
        object.__setattr__(self, "observations", obs)

    @property
    def n_regions(self) -> int:
        return self.observations.shape[1]

    def __len__(self):
        return self.observations.shape[0]


@dataclass(frozen=True)
class PredictorSpec:
    kind: str
    order: int = 1
    window: int = 1
    period: int = 24

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ForecastError(f"unknown predictor kind {self.kind!r}")
        if self.order < 1 or self.window < 1 or self.period < 1:
            raise ForecastError("order, window and period must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "PredictorSpec":
        """Parse ``persistence``, ``seasonal_naive(24)``, ``moving_average(3)`` or ``ar(2)``."""
        text = text.strip().replace(" ", "")
        name, _, arg = text.partition("(")
        arg = arg.rstrip(")")
        if name == "ar":
            return cls("ar", order=int(arg or 1))
        if name == "moving_average":
            return cls("moving_average", window=int(arg or 1))
        if name == "seasonal_naive":
            return cls("seasonal_naive", period=int(arg or 24))
        return cls(name)

    @property
    def context_length(self) -> int:
        return {"persistence": 1, "seasonal_naive": self.period,
                "moving_average": self.window, "ar": self.order}[self.kind]

    def label(self) -> str:
        arg = {"ar": self.order, "moving_average": self.window, "seasonal_naive": self.period}.get(self.kind)
        return self.kind if arg is None else f"{self.kind}({arg})"


@dataclass(frozen=True)
class SampleSet:
    """Paired context windows ``(n, p, N)`` and targets ``(n, tau, N)``."""

    contexts: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.contexts.shape[0]

    def take(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.contexts[idx], self.targets[idx])

    @property
    def flat_targets(self) -> np.ndarray:
        return self.targets.reshape(len(self), -1)


def make_samples(history, context_length: int, horizon: int) -> SampleSet:
    obs = history.observations if isinstance(history, SeriesHistory) else np.asarray(history, dtype=float)
    T = obs.shape[0]
    n = T - context_length - horizon + 1
    if n < 1:
        raise ForecastError(f"history of {T} rows cannot supply context {context_length} + horizon {horizon}")
    win = np.lib.stride_tricks.sliding_window_view(obs, context_length + horizon, axis=0)
    win = np.moveaxis(win, -1, 1)[:n]  # (n, p + tau, N)
    return SampleSet(win[:, :context_length].copy(), win[:, context_length:].copy())


@dataclass(frozen=True)
class Forecast:
    point: np.ndarray
    horizon: int
    model: str

    @property
    def by_interval(self) -> np.ndarray:
        return self.point.reshape(self.horizon, -1)


@dataclass(frozen=True)
class FittedPredictor:
    spec: PredictorSpec
    n_regions: int
    # ar: (N, order + 1) rows of [intercept, phi_1, ..., phi_p]
    coef: np.ndarray = field(default=None)

    def step(self, windows: np.ndarray) -> np.ndarray:
        """One-step forecasts from (n, p, N) windows (unclamped)."""
        kind = self.spec.kind
        if kind == "persistence":
            return windows[:, -1]
        if kind == "moving_average":
            return windows[:, -self.spec.window:].mean(axis=1)
        if kind == "seasonal_naive":
            return windows[:, -self.spec.period]
        lags = windows[:, ::-1][:, : self.spec.order]  # lag 1 first
        return self.coef[:, 0] + np.einsum("nlk,kl->nk", lags, self.coef[:, 1:])

    def forecast_batch(self, contexts: np.ndarray, horizon: int) -> np.ndarray:
        """Recursive multi-step forecasts, shape (n, horizon, N), clamped at 0."""
        p = self.spec.context_length
        contexts = np.asarray(contexts, dtype=float)
        if contexts.ndim != 3 or contexts.shape[1] < p or contexts.shape[2] != self.n_regions:
            raise ForecastError(f"context needs at least {p} rows of {self.n_regions} regions")
        window = contexts[:, -p:]
        out = np.empty((contexts.shape[0], horizon, self.n_regions))
        flat = self.spec.kind in ("persistence", "moving_average")
        for h in range(horizon):
            nxt = self.step(window)
            out[:, h] = nxt
            if not flat:
                window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
        return np.maximum(out, 0.0)

    def forecast(self, context: np.ndarray, horizon: int) -> np.ndarray:
        context = np.asarray(context, dtype=float)
        if context.ndim == 1:
            context = context[:, None]
        return self.forecast_batch(context[None], horizon)[0]


def _fit_ar(blocks: np.ndarray, p: int, N: int) -> np.ndarray:
    """Per-region least squares on all one-step pairs inside (n, L, N) blocks."""
    L = blocks.shape[1]
    if L <= p:
        raise ForecastError(f"ar({p}) needs windows longer than {p}")
    lags = np.stack([blocks[:, p - l:L - l] for l in range(1, p + 1)], axis=-1)  # (n, L-p, N, p)
    lags = lags.reshape(-1, N, p)
    y = blocks[:, p:].reshape(-1, N)
    if y.shape[0] < p + 1:
        raise ForecastError(f"ar({p}) needs at least {p + 1} one-step pairs, got {y.shape[0]}")
    coef = np.empty((N, p + 1))
    for i in range(N):
        X = np.column_stack([np.ones(y.shape[0]), lags[:, i]])
        target = y[:, i]
        beta, _, rank, _ = np.linalg.lstsq(X, target, rcond=None)
        if rank < X.shape[1]:
            beta = np.linalg.solve(X.T @ X + RIDGE * np.eye(X.shape[1]), X.T @ target)
        coef[i] = beta
    return coef


def fit(spec: PredictorSpec, history, horizon: int = 1) -> FittedPredictor:
    """Fit ``spec`` on a :class:`SeriesHistory` or on a :class:`SampleSet`.

    For a sample set the autoregression uses every one-step pair inside each
    (context + target) window; for a series it uses all pairs of the series.
    """
    if isinstance(history, SampleSet):
        blocks = np.concatenate([history.contexts, history.targets], axis=1)
        N = history.contexts.shape[2]
    else:
        if not isinstance(history, SeriesHistory):
            history = SeriesHistory(history)
        need = spec.context_length + 2 * horizon
        if len(history) < need:
            raise ForecastError(f"{spec.label()} needs at least {need} rows, got {len(history)}")
        blocks = history.observations[None]
        N = history.n_regions
    if spec.kind != "ar":
        return FittedPredictor(spec, N)
    return FittedPredictor(spec, N, _fit_ar(blocks, spec.order, N))


def predict(fitted: FittedPredictor, context, horizon: int) -> Forecast:
    out = fitted.forecast(context, horizon)
    return Forecast(out.reshape(-1), horizon, fitted.spec.label())


def forecast_samples(fitted: FittedPredictor, samples: SampleSet) -> np.ndarray:
    """Flattened forecasts for each sample, shape (n, tau * N)."""
    n, horizon = samples.targets.shape[:2]
    return fitted.forecast_batch(samples.contexts, horizon).reshape(n, -1)


def residuals(fitted: FittedPredictor, history, horizon: int = 1) -> np.ndarray:
    """Residual rows z - z_hat, one per in-sample prediction window."""
    samples = history if isinstance(history, SampleSet) else make_samples(history, fitted.spec.context_length, horizon)
    return samples.flat_targets - forecast_samples(fitted, samples)


def mse(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if predicted.shape != actual.shape:
        raise ForecastError("prediction and target lengths differ")
    return float(np.mean((predicted - actual) ** 2))


def select_predictor(specs, history: SeriesHistory, horizon: int = 1, holdout: float = 0.25):
    """Held-out MSE for each spec (fit on the leading part, score on the rest)."""
    T = len(history)
    split = int(round(T * (1 - holdout)))
    train = SeriesHistory(history.observations[:split], history.role, history.interval_minutes)
    table = []
    for spec in specs:
        fitted = fit(spec, train, horizon)
        p = spec.context_length
        # score windows whose targets fall in the held-out part
        test = make_samples(history.observations[split - p:], p, horizon)
        err = mse(forecast_samples(fitted, test), test.flat_targets)
        table.append((spec, err))
    best = min(table, key=lambda item: item[1])[0]
    return best, table
