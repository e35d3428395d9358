import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rampwise.models.armax import ArmaxModel, NonStationaryFit, fit_armax, forecast, simulate_armax
from rampwise.models.forest import (EmptyNode, Forest, ForestConfig, NaNInput, SingleClass, UntrainedModel,
                                    feature_importance, fit_forest, gini, merge_runs, predict,
                                    predict_proba, two_stage_predict)
from rampwise.models.multitask import (BANDS, DivergenceDetected, LossConfig, MultiTaskHead, ShapeMismatch,
                                       Targets, TrainConfig, combine, flat_gradient, head_gradient,
                                       head_loss, huber, multitask_loss, sgd_fit)
from rampwise.rba import EventKind

# -- gini / forest -----------------------------------------------------------------


def test_gini_examples():
    assert gini([10, 0]) == 0.0
    assert gini([5, 5]) == pytest.approx(0.5)
    assert gini([1, 1, 1]) == pytest.approx(2 / 3)
    with pytest.raises(EmptyNode):
        gini([0, 0])


@given(st.lists(st.integers(0, 50), min_size=2, max_size=6).filter(lambda c: sum(c) > 0))
def test_gini_range(counts):
    g = gini(counts)
    assert g == pytest.approx(oracles.gini(counts), abs=1e-12)
    assert -1e-12 <= g <= 1 - 1 / len(counts) + 1e-12
    assert (abs(g) < 1e-12) == (sum(c > 0 for c in counts) == 1)


def test_forest_separable_training_accuracy():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 4))
    y = (X[:, 2] > 0.1).astype(int)
    f = fit_forest(X, y, ForestConfig(n_trees=10, seed=1))
    assert np.mean(predict(f, X) == y) == 1.0
    assert np.argmax(feature_importance(f)) == 2


def test_forest_xor():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(800, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    f = fit_forest(X, y, ForestConfig(n_trees=100, max_depth=4, max_features="all", seed=2))
    Xt = rng.uniform(-1, 1, size=(800, 2))
    yt = ((Xt[:, 0] > 0) ^ (Xt[:, 1] > 0)).astype(int)
    assert np.mean(predict(f, Xt) == yt) >= 0.95


def test_forest_determinism_and_json():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 6))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    cfg = ForestConfig(n_trees=15, seed=7)
    a, b = fit_forest(X, y, cfg), fit_forest(X, y, cfg)
    np.testing.assert_array_equal(predict_proba(a, X), predict_proba(b, X))
    back = Forest.from_json(a.to_json())
    np.testing.assert_array_equal(predict_proba(back, X), predict_proba(a, X))


def test_forest_probabilities_in_unit_interval():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(150, 3))
    y = rng.integers(0, 3, 150)
    p = predict_proba(fit_forest(X, y, ForestConfig(n_trees=8)), X)
    assert p.shape == (150, 3)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_forest_errors():
    X = np.zeros((10, 2))
    with pytest.raises(SingleClass):
        fit_forest(X, np.ones(10))
    X[3, 1] = np.nan
    with pytest.raises(NaNInput):
        fit_forest(X, np.r_[np.zeros(5), np.ones(5)])
    with pytest.raises(UntrainedModel):
        two_stage_predict(None, None, np.zeros((3, 1)))


@given(st.lists(st.booleans(), max_size=60), st.integers(1, 8), st.integers(1, 5))
def test_merge_runs_matches_oracle(mask, gap_min, d_min):
    assert merge_runs(mask, gap_min, d_min) == oracles.runs_merged(mask, gap_min, d_min)


def _step_forests():
    # one feature; detection says "event" above 0.5, type says Up
    X = np.linspace(0, 1, 200)[:, None]
    det = fit_forest(X, (X[:, 0] > 0.5).astype(int), ForestConfig(n_trees=5, seed=0))
    typ = fit_forest(X, np.where(X[:, 0] > 0.75, 0, 1), ForestConfig(n_trees=5, seed=1))
    return det, typ


def test_two_stage_merge_rule():
    det, typ = _step_forests()
    rows = np.r_[np.full(10, 0.9), np.full(5, 0.1), np.full(10, 0.9)][:, None]
    one = two_stage_predict(det, typ, rows, 0.5, gap_min=6)
    assert [(e.onset, e.end, e.duration) for e in one] == [(0, 24, 25)]
    assert one.events[0].kind is EventKind.UP
    two = two_stage_predict(det, typ, rows, 0.5, gap_min=3)
    assert [(e.onset, e.end) for e in two] == [(0, 9), (15, 24)]
    assert len(two_stage_predict(det, typ, np.full((30, 1), 0.1), 0.5)) == 0
    with pytest.raises(ValueError):
        two_stage_predict(det, typ, rows, 1.0)


# -- ARMAX -------------------------------------------------------------------------


def test_armax_one_step_hand_value():
    m = ArmaxModel(0.0, 0.5, 0.0)
    assert forecast(m, [10.0]) == pytest.approx([5.0])


def test_armax_recovers_parameters():
    y = simulate_armax(5000, 1.0, 0.6, 0.3, seed=11)
    m = fit_armax(y)
    assert m.c == pytest.approx(1.0, abs=0.05)
    assert m.phi1 == pytest.approx(0.6, abs=0.05)
    assert m.theta1 == pytest.approx(0.3, abs=0.05)
    assert m.sigma2 == pytest.approx(1.0, abs=0.1)


def test_armax_white_noise():
    y = np.random.default_rng(12).normal(size=5000)
    m = fit_armax(y)
    assert abs(m.phi1) <= 0.05 and abs(m.theta1) <= 0.05


def test_armax_exogenous_coefficient():
    x = np.random.default_rng(13).normal(size=3000)
    y = simulate_armax(3000, 0.5, 0.4, 0.2, beta=[2.0], exog=x, seed=13)
    m = fit_armax(y, x)
    assert m.beta[0] == pytest.approx(2.0, abs=0.05)


def test_armax_forecast_converges_to_mean():
    m = ArmaxModel(1.0, 0.6, 0.3)
    path = forecast(m, [0.0, 4.0, -2.0], steps=100)
    assert path[-1] == pytest.approx(1.0 / 0.4, abs=1e-6)


def test_armax_short_series_and_json():
    with pytest.raises(ValueError):
        fit_armax(np.ones(20))
    m = ArmaxModel(0.1, 0.2, 0.3, np.array([0.4]), 0.5)
    back = ArmaxModel.from_json(m.to_json())
    assert (back.c, back.phi1, back.theta1, back.sigma2) == (0.1, 0.2, 0.3, 0.5)
    assert back.beta.tolist() == [0.4]


def test_armax_nonstationary_projection_warns():
    y = np.cumsum(np.random.default_rng(14).normal(size=600)) + 0.5 * np.arange(600)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        m = fit_armax(y)
    assert abs(m.phi1) < 0.999
    assert any(issubclass(x.category, NonStationaryFit) for x in w)


# -- multitask head ------------------------------------------------------------------


def test_huber_examples():
    assert huber(0.5, 1) == 0.125
    assert huber(2.0, 1) == 1.5
    assert huber(0.0) == 0.0
    with pytest.raises(ValueError):
        huber(1.0, 0)


@given(st.floats(0.1, 5))
def test_huber_c1_at_delta(delta):
    h = 1e-6
    for r in (delta, -delta):
        left = (huber(r, delta) - huber(r - h, delta)) / h
        right = (huber(r + h, delta) - huber(r, delta)) / h
        assert left == pytest.approx(right, abs=1e-4)
        assert huber(r - 1e-12, delta) == pytest.approx(huber(r + 1e-12, delta), abs=1e-9)
    for r in np.linspace(-3, 3, 13):
        assert huber(r, delta) == pytest.approx(oracles.huber(r, delta))


def test_combine_weighted_sum():
    parts = dict.fromkeys(("occ", "type", "time", "mag", "dur"), 0.1)
    assert combine(parts) == pytest.approx(0.82)


def _targets(n, rng, event_frac=0.5):
    occ = (rng.random(n) < event_frac).astype(float)
    return Targets(occ, rng.integers(0, 3, n), rng.uniform(0, 5, n), rng.normal(size=(n, len(BANDS))),
                   rng.uniform(0, 4, (n, len(BANDS))))


def _perfect_predictions(t: Targets):
    n = len(t)
    probs = np.zeros((n, 3))
    probs[np.arange(n), t.type] = 1.0
    return {"occ": t.occ.copy(), "type": probs, "time": t.time.copy(), "mag": t.mag.copy(),
            "dur": t.dur.copy()}


def test_loss_perfect_is_zero():
    t = _targets(30, np.random.default_rng(0))
    out = multitask_loss(_perfect_predictions(t), t)
    assert out["total"] == 0.0


def test_loss_equal_band_losses_normalize_out():
    t = _targets(20, np.random.default_rng(1), event_frac=1.0)
    pred = _perfect_predictions(t)
    pred["mag"] = t.mag + 0.5  # huber(0.5) = 0.125 in every band
    assert multitask_loss(pred, t)["mag"] == pytest.approx(0.125)


def test_loss_mask_excludes_non_events():
    t = _targets(20, np.random.default_rng(2), event_frac=0.0)
    pred = _perfect_predictions(t)
    pred["mag"] = pred["mag"] + 100
    pred["time"] = pred["time"] + 100
    assert multitask_loss(pred, t)["total"] == 0.0


def test_loss_shape_mismatch():
    t = _targets(5, np.random.default_rng(3))
    pred = _perfect_predictions(t)
    pred["mag"] = pred["mag"][:, :2]
    with pytest.raises(ShapeMismatch):
        multitask_loss(pred, t)


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    t = _targets(15, rng)
    head = MultiTaskHead.init(4, seed=seed, scale=1.0)
    assert multitask_loss(head.predict(rng.normal(size=(15, 4))), t)["total"] >= 0


def test_zero_everything_gives_zero_band_gradients():
    head = MultiTaskHead.init(3, scale=0.0)
    n = 8
    t = Targets(np.ones(n), np.zeros(n, int), np.zeros(n), np.zeros((n, len(BANDS))),
                np.zeros((n, len(BANDS))))
    g = head_gradient(head, np.zeros((n, 3)), t)
    for k in ("W_mag", "b_mag", "W_dur", "b_dur"):
        assert np.all(g[k] == 0)


@pytest.mark.parametrize("cfg", [LossConfig(), LossConfig.regression_variant()])
def test_gradient_matches_finite_differences(cfg):
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        d, n = 4, 12
        head = MultiTaskHead.init(d, seed=trial, scale=0.7)
        Z = rng.normal(size=(n, d))
        t = _targets(n, rng)
        g = flat_gradient(head_gradient(head, Z, t, cfg))
        theta = head.flat()
        h = 1e-5
        for i in range(len(theta)):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd = (head_loss(head.with_flat(up), Z, t, cfg) - head_loss(head.with_flat(dn), Z, t, cfg)) / (2 * h)
            if abs(g[i]) > 1e-8 and abs(fd) > 1e-8:
                worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd)))
    assert worst < 1e-4


def test_sgd_separable_occurrence():
    rng = np.random.default_rng(5)
    Z = rng.normal(size=(400, 3))
    occ = (Z[:, 0] > 0).astype(float)
    n = len(Z)
    t = Targets(occ, np.zeros(n, int), np.zeros(n), np.zeros((n, len(BANDS))), np.zeros((n, len(BANDS))))
    head, hist = sgd_fit(MultiTaskHead.init(3), Z * 5, t, train=TrainConfig(lr=0.2, epochs=60, seed=1))
    assert multitask_loss(head.predict(Z * 5), t)["occ"] < 0.1
    assert hist[-1] < hist[0]


def test_sgd_deterministic_and_json():
    rng = np.random.default_rng(6)
    Z = rng.normal(size=(100, 3))
    t = _targets(100, rng)
    a, _ = sgd_fit(MultiTaskHead.init(3), Z, t, train=TrainConfig(epochs=3, seed=4))
    b, _ = sgd_fit(MultiTaskHead.init(3), Z, t, train=TrainConfig(epochs=3, seed=4))
    np.testing.assert_array_equal(a.flat(), b.flat())
    np.testing.assert_array_equal(MultiTaskHead.from_json(a.to_json()).flat(), a.flat())


def test_sgd_divergence_detected():
    rng = np.random.default_rng(7)
    Z = rng.normal(size=(50, 3)) * 1e150
    t = _targets(50, rng)
    with pytest.raises(DivergenceDetected) as err:
        with np.errstate(all="ignore"):
            sgd_fit(MultiTaskHead.init(3), Z, t, train=TrainConfig(lr=1e10, epochs=5))
    assert err.value.last_good is not None


def test_head_output_constraints():
    head = MultiTaskHead.init(5, seed=3, scale=2.0)
    out = head.predict(np.random.default_rng(8).normal(size=(40, 5)))
    assert out["occ"].shape == (40,) and out["type"].shape == (40, 3)
    assert np.all(out["time"] >= 0) and np.all(out["dur"] >= 0)
    np.testing.assert_allclose(out["type"].sum(axis=1), 1.0)
