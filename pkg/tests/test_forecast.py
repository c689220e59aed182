import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evdro import forecast as fc


def ar_series(T, phi, c=0.0, start=10.0, noise=0.0, seed=0, N=1):
    rng = np.random.default_rng(seed)
    z = np.empty((T, N))
    z[0] = start
    for t in range(1, T):
        z[t] = c + phi * z[t - 1] + noise * rng.standard_normal(N)
    return np.abs(z)


def test_parse_and_labels():
    assert fc.PredictorSpec.parse("ar(2)") == fc.PredictorSpec("ar", order=2)
    assert fc.PredictorSpec.parse("moving_average(3)").window == 3
    assert fc.PredictorSpec.parse("seasonal_naive(12)").context_length == 12
    assert fc.PredictorSpec.parse("persistence").label() == "persistence"
    with pytest.raises(fc.ForecastError):
        fc.PredictorSpec("arima")
    with pytest.raises(fc.ForecastError):
        fc.PredictorSpec("ar", order=0)


def test_history_validation():
    with pytest.raises(fc.ForecastError):
        fc.SeriesHistory([[1.0, -1.0]])
    assert fc.SeriesHistory([1.0, 2.0]).n_regions == 1


def test_persistence_predicts_last_value():
    hist = fc.SeriesHistory(np.array([[1.0, 4.0], [2.0, 5.0], [3.0, 7.0]]))
    f = fc.fit(fc.PredictorSpec("persistence"), hist)
    out = fc.predict(f, hist.observations, 2)
    assert out.by_interval.tolist() == [[3.0, 7.0], [3.0, 7.0]]


def test_ar1_recovers_exact_coefficient():
    z = ar_series(60, 0.5, start=1000.0)
    f = fc.fit(fc.PredictorSpec("ar", 1), fc.SeriesHistory(z))
    assert abs(f.coef[0, 1] - 0.5) < 1e-8
    assert abs(fc.predict(f, z, 1).point[0] - 0.5 * z[-1, 0]) < 1e-6


def test_seasonal_naive_on_periodic_day_has_zero_residuals():
    day = np.random.default_rng(0).uniform(1, 10, size=(24, 3))
    hist = fc.SeriesHistory(np.tile(day, (4, 1)))
    f = fc.fit(fc.PredictorSpec("seasonal_naive", period=24), hist)
    assert np.abs(fc.residuals(f, hist)).max() == 0.0
    assert np.allclose(fc.predict(f, hist.observations, 1).point, day[0])


def test_insufficient_history():
    with pytest.raises(fc.ForecastError):
        fc.fit(fc.PredictorSpec("ar", 3), fc.SeriesHistory(np.ones((4, 1))), horizon=1)
    f = fc.fit(fc.PredictorSpec("ar", 2), fc.SeriesHistory(ar_series(30, 0.3, c=2)))
    with pytest.raises(fc.ForecastError):
        f.forecast(np.ones((1, 1)), 1)


def test_constant_series_uses_ridge_fallback():
    f = fc.fit(fc.PredictorSpec("ar", 2), fc.SeriesHistory(np.full((30, 2), 4.0)))
    assert np.all(np.isfinite(f.coef))
    assert np.allclose(fc.predict(f, np.full((5, 2), 4.0), 3).point, 4.0, atol=1e-4)


def test_forecast_is_clamped_at_zero():
    f = fc.FittedPredictor(fc.PredictorSpec("ar", 1), 1, np.array([[-5.0, 0.1]]))
    assert fc.predict(f, np.array([[1.0]]), 2).point.tolist() == [0.0, 0.0]


def test_residuals_examples():
    hist = fc.SeriesHistory(np.full((20, 1), 3.0))
    f = fc.fit(fc.PredictorSpec("persistence"), hist)
    assert np.all(fc.residuals(f, hist) == 0)

    rng = np.random.default_rng(3)
    T, sigma = 4000, 1.0
    eps = rng.normal(0, sigma, T) + 10
    hist = fc.SeriesHistory(eps)
    res = fc.residuals(fc.fit(fc.PredictorSpec("persistence"), hist), hist)
    assert np.allclose(res[:, 0], np.diff(eps))
    assert abs(res.mean()) <= 3 * sigma * np.sqrt(2.0 / T)


def test_mse_examples_and_ar_beats_persistence():
    assert fc.mse([1, 2], [1, 2]) == 0.0
    assert fc.mse([1, 2], [3, 2]) == 2.0
    with pytest.raises(fc.ForecastError):
        fc.mse([1], [1, 2])
    z = ar_series(600, 0.6, c=4.0, noise=1.0, seed=5, N=2)
    hist = fc.SeriesHistory(z)
    best, table = fc.select_predictor([fc.PredictorSpec("persistence"), fc.PredictorSpec("ar", 1)], hist)
    scores = {s.kind: e for s, e in table}
    assert scores["ar"] < scores["persistence"]
    assert best.kind == "ar"


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["persistence", "moving_average(3)", "ar(1)", "ar(2)",
                                                     "seasonal_naive(5)"]), st.integers(1, 3))
def test_residual_identity_and_determinism(seed, text, horizon):
    rng = np.random.default_rng(seed)
    hist = fc.SeriesHistory(rng.uniform(0, 20, size=(40, 2)))
    spec = fc.PredictorSpec.parse(text)
    f1 = fc.fit(spec, hist, horizon)
    f2 = fc.fit(spec, hist, horizon)
    samples = fc.make_samples(hist, spec.context_length, horizon)
    pred = fc.forecast_samples(f1, samples)
    assert np.array_equal(pred, fc.forecast_samples(f2, samples))
    res = fc.residuals(f1, samples)
    assert np.allclose(pred + res, samples.flat_targets, atol=1e-12)
    assert np.all(pred >= 0)


@given(st.floats(0.5, 0.95), st.floats(0.5, 5.0))
def test_model_class_data_is_fit_exactly(phi, c):
    # short window so the path has not yet settled on its fixed point
    z = ar_series(25, phi, c=c, start=c / (1 - phi) + 50.0)
    hist = fc.SeriesHistory(z)
    f = fc.fit(fc.PredictorSpec("ar", 1), hist)
    assert fc.mse(fc.forecast_samples(f, fc.make_samples(hist, 1, 1)), z[1:]) <= 1e-12
