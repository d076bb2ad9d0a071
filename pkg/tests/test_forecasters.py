import numpy as np
import pytest

from oracles import naive_dot
from driverlens import encoders as E
from driverlens import forecasters as fc
from driverlens.errors import ConfigError, ValidationError
from driverlens.timeline import DriverEvent, EpisodeRecord, GlucoseTrace, TimeGrid, extract_windows


def _episode(n=200, events=(), pid="p1", seed=0):
    gen = np.random.Generator(np.random.Philox(seed))
    values = 130 + np.cumsum(gen.normal(0, 1.5, n))
    return EpisodeRecord(pid, GlucoseTrace(TimeGrid(0, 5, n), np.clip(values, 40, 400)), tuple(events))


def _dm(episodes, spec, horizons=(6, 12)):
    windows = [w for ep in episodes for w in extract_windows(ep, spec.context, horizons)]
    encs = [E.encode_episode(ep) for ep in episodes]
    return fc.build_design_matrix(episodes, windows, spec, encs)


def test_cgm_lag_row_is_direct_copy():
    ep = _episode()
    spec = fc.FeatureSpec(("cgm_lags",), context=2)
    dm = _dm([ep], spec, (1,))
    assert dm.columns == ["cgm_lag1", "cgm_lag0"]
    np.testing.assert_array_equal(dm.X[0], ep.cgm.values[0:2])
    assert dm.Y[0, 0] == ep.cgm.values[2]


def test_restricted_multi_matrix_is_identical_to_uni():
    ep = _episode(events=[DriverEvent(100, "meal", 40.0), DriverEvent(105, "bolus", 3.0)])
    uni, multi = fc.univariate_spec(), fc.multivariate_spec("encoded")
    a = _dm([ep], uni)
    b = _dm([ep], multi).restrict(uni.columns)
    assert a.X.tobytes() == b.X.tobytes() and a.columns == b.columns


def test_raw_impulse_columns_sum_to_dose():
    ep = _episode(events=[DriverEvent(503, "bolus", 6.0)])
    spec = fc.multivariate_spec("raw")
    dm = fc.design_matrix([ep], [np.array([110])], spec, (1,))
    cols = [i for i, c in enumerate(dm.columns) if c.startswith("raw_bolus")]
    assert dm.X[0, cols].sum() == 6.0
    assert dm.X[0, dm.columns.index("raw_bolus_lag9")] == 6.0  # 503 min lands on point 101 = anchor - 9


def test_mixed_raw_and_encoded_requires_opt_in():
    with pytest.raises(ConfigError):
        fc.FeatureSpec(("cgm_lags", "iob", "raw_events"))
    fc.FeatureSpec(("cgm_lags", "iob", "raw_events"), allow_mixed=True)


def _linear_dm(X, y):
    n = len(X)
    return fc.DesignMatrix(X, y[:, None], ["cgm_lag0"], (1,), np.array(["p"] * n, dtype=object),
                           np.array(["p@0"] * n, dtype=object), np.arange(n))


def test_ridge_exact_recovery():
    x = np.arange(1.0, 9.0)
    dm = _linear_dm(x[:, None], 2 * x)
    model = fc.fit(fc.ModelFamily("ridge_ar", ridge_lambda=0.0), dm, spec=fc.FeatureSpec(("cgm_lags",), 1))
    assert model.raw_coefficients()[0, 0] == pytest.approx(2.0, abs=1e-9)
    assert fc.forecast(model, [10.0])[0] == pytest.approx(20.0, abs=1e-9)


def test_ridge_residuals_orthogonal():
    ep = _episode(400, seed=3)
    spec = fc.univariate_spec()
    dm = _dm([ep], spec)
    model = fc.fit(fc.ModelFamily("ridge_ar", ridge_lambda=0.0), dm, spec=spec)
    Z = (dm.X - model.mean) / model.scale
    resid = dm.Y - fc.predict(model, dm)
    assert np.max(np.abs(Z.T @ resid)) / len(Z) < 1e-8
    assert np.max(np.abs(resid.mean(axis=0))) < 1e-8


def test_ridge_singular_without_penalty():
    X = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
    dm = fc.DesignMatrix(X, X[:, :1], ["cgm_lag1", "cgm_lag0"], (1,), np.array(["p"] * 10, dtype=object),
                         np.array(["k"] * 10, dtype=object), np.arange(10))
    with pytest.raises(ValidationError, match="ridge_lambda"):
        fc.fit(fc.ModelFamily("ridge_ar", ridge_lambda=0.0), dm, spec=fc.FeatureSpec(("cgm_lags",), 2))


def test_ridge_prediction_matches_naive_dot():
    ep = _episode(300, events=[DriverEvent(200, "meal", 50.0)], seed=5)
    spec = fc.multivariate_spec("encoded")
    dm = _dm([ep], spec)
    model = fc.fit(fc.ModelFamily("ridge_ar"), dm, spec=spec)
    W = model.raw_coefficients()
    b = model.intercept - (model.mean / model.scale) @ model.weights
    for row, pred in zip(dm.X[:5], fc.predict(model, dm.X[:5])):
        np.testing.assert_allclose(pred, naive_dot(row.tolist(), W.tolist(), b.tolist()), rtol=1e-10)


def test_persistence_and_patient_mean():
    a, b = _episode(pid="a", seed=1), _episode(pid="b", seed=2)
    spec = fc.univariate_spec()
    dm = _dm([a, b], spec)
    pers = fc.fit(fc.ModelFamily("persistence"), dm, spec=spec)
    row = dm.X[0].copy()
    row[dm.columns.index("cgm_lag0")] = 140.0
    assert fc.forecast(pers, row).tolist() == [140.0, 140.0]
    pm = fc.fit(fc.ModelFamily("patient_mean"), dm, spec=spec)
    np.testing.assert_allclose(fc.forecast(pm, row, "a"), dm.Y[dm.patients == "a"].mean(axis=0))
    np.testing.assert_allclose(fc.forecast(pm, row, "zz"), dm.Y.mean(axis=0))


def test_mlp_training_reduces_loss_and_is_seeded():
    ep = _episode(600, events=[DriverEvent(1000, "meal", 60.0)], seed=7)
    spec = fc.multivariate_spec("encoded")
    dm = _dm([ep], spec)
    fam = fc.ModelFamily("mlp", hidden=8, epochs=3)
    m1 = fc.fit(fam, dm, seed=4, spec=spec)
    m2 = fc.fit(fam, dm, seed=4, spec=spec)
    np.testing.assert_array_equal(fc.predict(m1, dm), fc.predict(m2, dm))
    untrained = fc.fit(fc.ModelFamily("mlp", hidden=8, epochs=0), dm, seed=4, spec=spec)
    err = lambda m: np.mean((fc.predict(m, dm) - dm.Y) ** 2)
    assert err(m1) < err(untrained)


def test_matched_pair_shares_everything_but_channels():
    ep = _episode(300, events=[DriverEvent(300, "bolus", 2.0)])
    uni, multi = fc.univariate_spec(), fc.multivariate_spec("encoded")
    dm = _dm([ep], multi)
    pair = fc.fit_pair(fc.ModelFamily("mlp", hidden=4, epochs=1), uni, multi, dm, seed=1)
    assert pair.uni.family == pair.multi.family
    assert pair.uni.input_mask is not None and pair.uni.input_mask.sum() == len(uni.columns)
    # drivers are masked, so changing them does not move the univariate prediction
    X2 = dm.X.copy()
    X2[:, [i for i, c in enumerate(dm.columns) if fc.column_channel(c) in fc.DRIVER_CHANNELS]] += 5.0
    np.testing.assert_array_equal(fc.predict(pair.uni, dm.X), fc.predict(pair.uni, X2))
    with pytest.raises(ValidationError):
        fc.MatchedPair(pair.multi, pair.uni)


def test_model_json_round_trip(tmp_path):
    ep = _episode(300)
    spec = fc.multivariate_spec("encoded")
    dm = _dm([ep], spec)
    for fam in (fc.ModelFamily("ridge_ar"), fc.ModelFamily("mlp", hidden=4, epochs=1), fc.ModelFamily("patient_mean")):
        model = fc.fit(fam, dm, seed=2, spec=spec)
        fc.save_model(model, tmp_path / "m.json")
        back = fc.load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(fc.predict(model, dm), fc.predict(back, dm))


def test_wrong_width_rejected():
    ep = _episode()
    spec = fc.univariate_spec()
    model = fc.fit(fc.ModelFamily("ridge_ar"), _dm([ep], spec), spec=spec)
    with pytest.raises(ValidationError):
        fc.predict(model, np.zeros((1, 3)))
