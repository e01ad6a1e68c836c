import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eadmnc.categorical import (
    CategoricalModel, SgdConfig, SgdDivergenceError, _gradient_cols, addends, fit_sgd, log_cond_prob,
    log_cond_prob_dataset, log_cond_prob_levels, log_cond_prob_matrix, logits, loss_and_gradient,
    term_estimator, term_estimators,
)
from eadmnc.data import Dataset, Schema, one_hot_matrix


def small_model(w, d, width):
    return CategoricalModel(np.asarray(w, dtype=float), d, width)


def test_term_estimator_at_ln3():
    # z = ln 3 gives s(z) = 3/4
    m = small_model([0.0, math.log(3.0), 0.0, 0.0], 1, 2)
    x = np.array([5.0])
    assert term_estimator(m, x, 0, 1) == pytest.approx(0.75, abs=1e-12)
    assert term_estimator(m, x, 0, 0) == pytest.approx(0.25, abs=1e-12)


def test_zero_weights_give_half_per_term():
    m = CategoricalModel.zeros(2, 5)
    x = np.array([1.0, -1.0])
    y = np.array([1, 0, 0, 1, 0])
    assert log_cond_prob(m, x, y) == pytest.approx(5 * math.log(0.5), abs=1e-12)
    np.testing.assert_allclose(term_estimators(m, x[None], y[None]), 0.5)


@settings(max_examples=80, deadline=None)
@given(st.floats(-30, 30), st.integers(0, 1))
def test_estimator_symmetry(z, bit):
    m = small_model([0.0, z, 0.0], 1, 1)
    a = term_estimator(m, np.zeros(1), 0, bit)
    b = term_estimator(m, np.zeros(1), 0, 1 - bit)
    assert a + b == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= a <= 1.0


def test_term_index_out_of_range():
    m = CategoricalModel.zeros(1, 3)
    with pytest.raises(IndexError):
        term_estimator(m, np.zeros(1), 3, 1)


def test_addends_sum_to_logit():
    rng = np.random.default_rng(0)
    m = small_model(rng.normal(size=2 + 1 + 4), 2, 4)
    x = rng.normal(size=2)
    z = logits(m, x)[0]
    for j in range(4):
        a = addends(m, x, j)
        assert a.shape == (7,)
        assert a.sum() == pytest.approx(z[j], abs=1e-12)
        # only one one-hot addend can be non-zero
        assert np.count_nonzero(a[3:]) <= 1


def test_extreme_logits_stay_finite():
    m = small_model([0.0, 800.0, 0.0], 1, 1)
    lp = log_cond_prob(m, np.zeros(1), np.array([0]))
    assert lp == pytest.approx(-800.0)
    assert log_cond_prob(m, np.zeros(1), np.array([1])) == pytest.approx(0.0, abs=1e-300)


def _levels_case(seed, n=40, d=2, cards=(3, 4)):
    rng = np.random.default_rng(seed)
    schema = Schema(tuple(f"x{i}" for i in range(d)), tuple(f"c{i}" for i in range(len(cards))),
                    tuple(tuple(str(v) for v in range(c)) for c in cards))
    levels = np.column_stack([rng.integers(0, c, n) for c in cards])
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d + 1 + sum(cards))
    return schema, X, levels, w


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_level_path_matches_one_hot_path(seed):
    schema, X, levels, w = _levels_case(seed)
    m = CategoricalModel(w, 2, schema.one_hot_width)
    Y = one_hot_matrix(levels, schema)
    a = log_cond_prob_matrix(m, X, Y)
    np.testing.assert_allclose(log_cond_prob_levels(m, X, levels, schema), a, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(log_cond_prob_dataset(m, X, levels, schema, workers=3, chunk_size=7), a,
                               rtol=1e-12, atol=1e-12)
    cols = np.where(levels < 0, -1, levels + schema.one_hot_offsets[None, :])
    np.testing.assert_allclose(_gradient_cols(w, X, cols, 1e-3), loss_and_gradient(w, X, Y, 1e-3)[1], atol=1e-14)


def test_gradient_matches_finite_differences():
    schema, X, levels, w = _levels_case(1, n=30)
    Y = one_hot_matrix(levels, schema)
    _, g = loss_and_gradient(w, X, Y, 1e-2)
    h = 1e-6
    fd = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        fd[i] = (loss_and_gradient(w + e, X, Y, 1e-2)[0] - loss_and_gradient(w - e, X, Y, 1e-2)[0]) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-5


def sign_fixture(n=4000, seed=0, card=2):
    """Level 0 iff x > 0; otherwise a level drawn from 1..card-1."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    other = np.ones(n, dtype=np.int64) if card == 2 else rng.integers(1, card, n)
    lv = np.where(x > 0, 0, other)
    schema = Schema(("x",), ("c",), (tuple(str(i) for i in range(card)),))
    return Dataset(schema, x[:, None], lv[:, None])


def test_deterministic_sign_fixture_fits_true_bits():
    # every bit is a deterministic function of sign(x)
    ds = sign_fixture()
    m = fit_sgd(ds, SgdConfig())
    Y = one_hot_matrix(ds.levels, ds.schema)
    est = term_estimators(m, ds.x, Y)
    assert est.mean() > 0.9


def test_sgd_lowers_training_nll():
    ds = sign_fixture(card=10)
    hist: list[float] = []
    m = fit_sgd(ds, SgdConfig(), history=hist)
    assert len(hist) == 11
    assert hist[-1] <= hist[0]
    Y = one_hot_matrix(ds.levels, ds.schema)
    assert term_estimators(m, ds.x, Y).mean() > 0.5


def test_zero_init_estimators_are_half():
    ds = sign_fixture(50)
    m0 = CategoricalModel.zeros(1, 2)
    np.testing.assert_array_equal(term_estimators(m0, ds.x, one_hot_matrix(ds.levels, ds.schema)), 0.5)


def test_sgd_is_deterministic():
    ds = sign_fixture(1000, 3, card=10)
    a = fit_sgd(ds, SgdConfig(epochs=3, seed=5))
    b = fit_sgd(ds, SgdConfig(epochs=3, seed=5))
    c = fit_sgd(ds, SgdConfig(epochs=3, seed=6))
    assert a.w.tobytes() == b.w.tobytes()
    assert a.w.tobytes() != c.w.tobytes()


def test_sgd_divergence_raises():
    ds = sign_fixture(1000, 4)
    ds = ds.with_x(ds.x * 1e3, None)
    with pytest.raises(SgdDivergenceError, match="learning_rate"):
        fit_sgd(ds, SgdConfig(learning_rate=1e3, epochs=3))


def test_sgd_config_validation():
    for kw in ({"learning_rate": 0.0}, {"batch_size": 0}, {"epochs": 0}, {"l2": -1.0}):
        with pytest.raises(ValueError):
            SgdConfig(**kw)


def test_model_round_trip_and_layout():
    m = small_model(np.arange(6.0), 2, 3)
    assert m.layout() == {"continuous": 2, "bias": 1, "one_hot": 3}
    assert m.bias == 2.0
    back = CategoricalModel.from_dict(m.to_dict())
    assert back.w.tobytes() == m.w.tobytes()
    with pytest.raises(ValueError):
        CategoricalModel(np.zeros(5), 2, 3)
