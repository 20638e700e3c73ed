import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ccsq.errors import DegenerateStatisticsError, ValidationError
from ccsq.metrics import (
    MomentStats,
    categorical_cross_entropy,
    ccc,
    ccc_loss_grad,
    evaluate_report,
    moments,
    pearson_cc,
    report_json,
    scale_predictions,
)

from oracles import brute_cc, brute_ccc, brute_moments, central_difference

X4 = [0.0, 1.0, 2.0, 3.0]
Y4 = [1.0, 1.0, 2.0, 2.0]


def test_cc_examples():
    assert pearson_cc([0, 1, 2], [0, 1, 2]) == pytest.approx(1.0, abs=1e-15)
    assert pearson_cc([-1, 0, 1], [1, 0, -1]) == pytest.approx(-1.0, abs=1e-15)
    assert pearson_cc(X4, Y4) == pytest.approx(brute_cc(X4, Y4), abs=1e-14)
    assert pearson_cc(X4, Y4) == pytest.approx(0.894427191, abs=1e-9)


def test_ccc_examples():
    y = [0.3, -1.2, 2.5, 0.0]
    assert ccc(y, y) == pytest.approx(1.0, abs=1e-15)
    assert ccc(X4, Y4) == pytest.approx(brute_ccc(X4, Y4), abs=1e-14)
    assert ccc(X4, Y4) == pytest.approx(2 / 3, abs=1e-12)
    assert ccc([2.0, 2.0, 2.0], [1.0, 2.0, 4.0]) == 0.0


def test_degenerate_inputs_raise():
    with pytest.raises(DegenerateStatisticsError):
        pearson_cc([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateStatisticsError):
        ccc([1, 1, 1], [1, 1, 1])
    with pytest.raises(DegenerateStatisticsError):
        scale_predictions([1, 1, 1], MomentStats(0.0, 1.0, 3))
    with pytest.raises(ValidationError):
        ccc([1, 2, 3], [1, 2])
    with pytest.raises(ValidationError):
        ccc([1], [1])
    with pytest.raises(ValidationError):
        ccc([1, np.nan], [1, 2])


def test_moments_are_population():
    m = moments([1, 1, 2, 2])
    assert (m.mean, m.variance, m.count) == (1.5, 0.25, 4)
    assert MomentStats.from_dict(m.to_dict()) == m
    with pytest.raises(ValidationError):
        MomentStats(0.0, -1.0, 2)


def test_scale_predictions():
    np.testing.assert_allclose(scale_predictions([0, 2], MomentStats(0.0, 1.0, 2)), [-1, 1], atol=1e-15)
    scaled = scale_predictions(X4, moments(Y4))
    assert ccc(scaled, Y4) == pytest.approx(pearson_cc(X4, Y4), abs=1e-12)
    assert ccc(scaled, Y4) == pytest.approx(0.894427191, abs=1e-9)
    assert np.mean(scaled) == pytest.approx(1.5, abs=1e-14)
    assert np.var(scaled) == pytest.approx(0.25, abs=1e-14)


def test_loss_examples():
    value, grad = ccc_loss_grad(X4, Y4)
    assert value == pytest.approx(1 / 3, abs=1e-12)
    y = np.array([0.1, 0.5, -0.3, 0.9])
    value, grad = ccc_loss_grad(y, y)
    assert value == pytest.approx(0.0, abs=1e-15)
    # at the optimum the gradient vanishes
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40)) if seed else 5
    x = rng.normal(size=n)
    y = rng.normal(size=n)
    _, grad = ccc_loss_grad(x, y)

    def f(v):
        return 1.0 - brute_ccc(v, list(y))

    fd = np.array([central_difference(f, list(x), i) for i in range(n)])
    err = np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
    assert err.max() <= 1e-5


def test_cross_entropy():
    assert categorical_cross_entropy([0.25] * 4, 2) == pytest.approx(math.log(4), abs=1e-15)
    assert categorical_cross_entropy([0.0, 1.0, 0.0], 1) == 0.0
    assert categorical_cross_entropy([0.5, 0.25, 0.25], 1) == pytest.approx(math.log(4), abs=1e-15)
    # floor keeps the value finite
    assert categorical_cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    for bad in ([0.5, 0.6], [1.2, -0.2], [[0.5, 0.5]]):
        with pytest.raises(ValidationError):
            categorical_cross_entropy(bad, 0)
    with pytest.raises(ValidationError):
        categorical_cross_entropy([0.5, 0.5], 2)


def test_evaluate_report_examples():
    r = evaluate_report(X4, Y4, moments(Y4))
    assert r["cc"] == pytest.approx(0.894427191, abs=1e-9)
    assert r["ccc"] == pytest.approx(2 / 3, abs=1e-12)
    assert r["scaled_ccc"] == pytest.approx(r["cc"], abs=1e-12)
    assert r["n"] == 4
    same = evaluate_report(Y4, Y4, MomentStats(0.0, 1.0, 10))
    assert same["cc"] == pytest.approx(1.0) and same["ccc"] == pytest.approx(1.0)
    with pytest.raises(DegenerateStatisticsError):
        evaluate_report([1, 1, 1, 1], Y4, moments(Y4))
    assert set(json.loads(report_json(r))) == {"cc", "ccc", "scaled_ccc", "n"}


def test_against_brute_force_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(300):
        n = int(rng.integers(2, 30))
        x = rng.normal(size=n) * rng.uniform(0.1, 5)
        y = 0.5 * x + rng.normal(size=n) + rng.normal()
        assert pearson_cc(x, y) == pytest.approx(brute_cc(list(x), list(y)), abs=1e-10)
        assert ccc(x, y) == pytest.approx(brute_ccc(list(x), list(y)), abs=1e-10)
    mx, my, vx, vy, _ = brute_moments(list(x), list(y))
    assert moments(x).mean == pytest.approx(mx, abs=1e-12)
    assert moments(x).variance == pytest.approx(vx, abs=1e-12)


finite = st.floats(-1e3, 1e3, allow_nan=False)
vec = st.integers(2, 40).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                    arrays(np.float64, n, elements=finite)))


def _non_degenerate(x, y):
    return np.var(x) > 1e-6 and np.var(y) > 1e-6


@settings(max_examples=200, deadline=None)
@given(vec)
def test_ccc_properties(pair):
    x, y = pair
    if not _non_degenerate(x, y):
        return
    c, r = ccc(x, y), pearson_cc(x, y)
    assert abs(c) <= abs(r) + 1e-12
    assert abs(r) <= 1 + 1e-12
    assert ccc(x, y) == ccc(y, x)
    assert ccc(2.5 * x + 3.0, 2.5 * y + 3.0) == pytest.approx(c, abs=1e-12)
    scaled = scale_predictions(x, moments(y))
    assert ccc(scaled, y) == pytest.approx(r, abs=1e-10)
