import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmdetect import gbdt, mlp
from lmdetect.explain import (EFFICIENCY_TOL, EfficiencyViolation, EmptyBackground, TooManyFeatures,
                              coalition_values, explain_global, explain_local, sample_background,
                              shapley_from_values, write_global_csv, write_local_json)


def bg(n=64, d=8, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


def nonlinear(X):
    X = np.atleast_2d(X)
    return 1 / (1 + np.exp(-(X[:, 0] * X[:, 1] - np.sin(X[:, 2]) + 0.3 * X[:, 3] ** 2 - X[:, 5])))


def permutation_shapley(f, x, background):
    """Reference: average marginal contribution over all feature orderings."""
    n = len(x)

    def v(S):
        rows = background.copy()
        rows[:, list(S)] = x[list(S)]
        return f(rows).mean()

    phi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for p in perms:
        S = []
        for i in p:
            before = v(S)
            S.append(i)
            phi[i] += v(S) - before
    return phi / len(perms)


def test_matches_permutation_definition():
    def f(X):
        X = np.atleast_2d(X)
        return np.tanh(X[:, 0] * X[:, 1] + np.sin(X[:, 2]) * X[:, 4] - X[:, 3] ** 2)

    B = bg(20, 5)
    x = np.array([0.5, -1.0, 2.0, 0.1, 1.5])
    a = explain_local(f, x, B)
    assert np.allclose(a.phi, permutation_shapley(f, x, B), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_efficiency(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=8) * 3
    a = explain_local(nonlinear, x, bg(32, seed=seed))
    assert abs(a.phi.sum() + a.base_value - a.fx) < 1e-9
    assert a.fx == nonlinear(x[None, :])[0]


def test_dummy_feature():
    a = explain_local(nonlinear, np.arange(8.0), bg())
    for i in (4, 6, 7):  # never read by the model
        assert abs(a.phi[i]) < 1e-12
    assert np.abs(a.phi[[0, 1, 2, 3, 5]]).min() > 0


def test_linearity():
    B = bg()
    x = np.linspace(-1, 1, 8)
    g = lambda X: np.tanh(np.atleast_2d(X) @ np.arange(1.0, 9.0) / 10)  # noqa: E731
    alpha, beta = 0.7, -2.5
    h = lambda X: alpha * nonlinear(X) + beta * g(X)  # noqa: E731
    lhs = explain_local(h, x, B).phi
    rhs = alpha * explain_local(nonlinear, x, B).phi + beta * explain_local(g, x, B).phi
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_symmetry():
    f = lambda X: np.atleast_2d(X)[:, 0] * np.atleast_2d(X)[:, 3] + np.atleast_2d(X)[:, 1]  # noqa: E731
    x = np.array([1.3, 0.2, 5.0, 1.3, 0, 0, 0, 0])
    B = bg()
    B[:, 3] = B[:, 0]  # the two coordinates are exchangeable in the background too
    a = explain_local(f, x, B)
    assert abs(a.phi[0] - a.phi[3]) < 1e-12


def test_additive_closed_form():
    gs = [np.sin, np.square, np.tanh, lambda v: 3 * v, np.cos, np.exp, lambda v: -v ** 3, np.abs]
    f = lambda X: sum(g(np.atleast_2d(X)[:, j]) for j, g in enumerate(gs))  # noqa: E731
    B = bg(50)
    x = np.array([0.3, -1.2, 2.0, 0.5, -0.7, 0.1, 1.1, -2.2])
    a = explain_local(f, x, B)
    closed = np.array([g(x[j]) - g(B[:, j]).mean() for j, g in enumerate(gs)])
    assert np.max(np.abs(a.phi - closed)) < 1e-9


def test_shapley_from_values_weights():
    # 2 players, v(0)=0, v({0})=1, v({1})=2, v({0,1})=5: phi = (2, 3)
    phi = shapley_from_values(np.array([0.0, 1.0, 2.0, 5.0]), 2)
    assert np.allclose(phi, [2.0, 3.0], atol=0)


def test_coalition_values_chunking():
    x = np.arange(8.0)
    B = bg(40)
    assert np.array_equal(coalition_values(nonlinear, x, B, chunk_rows=97),
                          coalition_values(nonlinear, x, B))


def test_errors():
    with pytest.raises(TooManyFeatures):
        explain_local(lambda X: X.sum(axis=1), np.zeros(17), np.zeros((2, 17)))
    with pytest.raises(EmptyBackground):
        explain_local(nonlinear, np.zeros(8), np.zeros((0, 8)))
    with pytest.raises(EfficiencyViolation):
        # a model that is not a function of its input cannot satisfy efficiency
        counter = iter(range(10**6))
        explain_local(lambda X: np.full(len(X), float(next(counter))), np.zeros(3), np.ones((4, 3)))
    assert EFFICIENCY_TOL == 1e-9


def test_global_importance():
    B = bg()
    rows = bg(10, seed=3)
    const = explain_global(lambda X: np.full(len(X), 0.3), rows, B)
    assert np.all(const.importance == 0)
    step = explain_global(lambda X: (np.atleast_2d(X)[:, 2] > 0).astype(float), rows, B)
    assert step.importance[2] > 0 and np.all(np.delete(step.importance, 2) == 0)
    assert step.ranked()[0][0] == "other_interactive_logins"
    assert step.to_dict()["n_rows"] == 10 and step.to_dict()["n_background"] == 64


def test_global_stability_on_disjoint_samples():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(4000, 8))
    B = sample_background(data, 128, seed=1)
    f = lambda X: 1 / (1 + np.exp(-(2 * np.atleast_2d(X)[:, 0] - np.atleast_2d(X)[:, 1]  # noqa: E731
                                     + 0.5 * np.atleast_2d(X)[:, 4])))
    a = explain_global(f, data[:150], B).importance
    b = explain_global(f, data[150:300], B).importance
    big = a > 0.05
    assert big.sum() == 3
    assert np.all(np.abs(a[big] - b[big]) / b[big] < 0.2)


def test_both_model_types():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(400, 8))
    y = X[:, 0] + X[:, 5] > 1
    gm = gbdt.train(X, y, gbdt.GbdtConfig(n_trees=10, max_depth=3))
    nm = mlp.train(X, y, mlp.MlpConfig(epochs=3))
    for model in (gm.predict_proba, nm.predict_proba):
        for x in X[:5]:
            a = explain_local(model, x, X[:64])
            assert abs(a.phi.sum() + a.base_value - a.fx) < 1e-9


def test_sample_background_and_writers(tmp_path):
    X = np.arange(100.0).reshape(50, 2)
    s = sample_background(X, 10, seed=4)
    assert len(s) == 10 and np.array_equal(s, sample_background(X, 10, seed=4))
    assert len(np.unique(s[:, 0])) == 10
    assert np.array_equal(sample_background(X, 100), X)
    a = explain_local(lambda R: np.atleast_2d(R)[:, 0] / 100, X[3], s, event_id=17, feature_names=("a", "b"))
    write_local_json([a], tmp_path / "l.json")
    doc = json.loads((tmp_path / "l.json").read_text())
    assert doc[0]["event_id"] == 17 and set(doc[0]["phi"]) == {"a", "b"}
    assert math.isclose(doc[0]["phi"]["a"] + doc[0]["base_value"], doc[0]["fx"], abs_tol=1e-12)
    g = explain_global(lambda R: np.atleast_2d(R)[:, 1], X[:4], s, feature_names=("a", "b"))
    write_global_csv(g, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "feature,mean_abs_phi" and lines[1].startswith("b,")
