import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gbdt_oracle
from lmdetect import gbdt
from lmdetect.features import LabelEncoding
from lmdetect.gbdt import (CorruptModel, DegenerateData, DimensionMismatch, GbdtConfig, GbdtModel, LossIncrease,
                           NonFiniteFeature, VersionMismatch)


def fixture(seed, n=200):
    rng = np.random.default_rng(seed)
    X = np.column_stack([
        rng.normal(size=n),
        rng.integers(0, 6, n).astype(float),
        rng.integers(0, 2, n).astype(float),
        rng.uniform(size=n),
    ])
    logit = 1.5 * X[:, 0] - 0.8 * X[:, 1] + 2.0 * X[:, 2] + rng.normal(scale=1.0, size=n) - 1.5
    return X, logit > 0


ORACLE_CASES = [
    dict(seed=0, n_trees=2, max_depth=2, spw=None),
    dict(seed=1, n_trees=4, max_depth=3, spw=10.0),
    dict(seed=2, n_trees=3, max_depth=4, spw=1000.0, lam=0.5, mch=0.1, gamma=0.01),
    dict(seed=3, n_trees=5, max_depth=2, spw=1.0, eta=0.3),
]


@pytest.mark.parametrize("case", ORACLE_CASES)
def test_histogram_trainer_matches_exact_greedy(case):
    case = dict(case)
    X, y = fixture(case.pop("seed"))
    lam, mch, gamma, eta = case.pop("lam", 1.0), case.pop("mch", 1.0), case.pop("gamma", 0.0), case.pop("eta", 0.1)
    cfg = GbdtConfig(n_trees=case["n_trees"], max_depth=case["max_depth"], learning_rate=eta, lambda_l2=lam,
                     gamma_min_gain=gamma, min_child_hessian=mch, scale_pos_weight=case["spw"], max_bins=256)
    model = gbdt.train(X, y, cfg)
    ref, ref_loss = gbdt_oracle.train(X, y, case["n_trees"], case["max_depth"], eta, lam, gamma, mch, case["spw"])
    assert len(model.trees) == len(ref)
    n_inner = 0
    for tree, rt in zip(model.trees, ref):
        nodes = gbdt_oracle.preorder(rt)
        assert len(nodes) == len(tree)
        for i, (f, v) in enumerate(nodes):
            assert tree.feature[i] == f
            if f >= 0:
                n_inner += 1
                assert tree.threshold[i] == v
            else:
                assert abs(tree.value[i] - v) <= 1e-9
    assert n_inner > len(ref)  # the trees actually split
    assert np.allclose(model.loss_trace, ref_loss, rtol=1e-9, atol=0)
    assert all(b <= a for a, b in zip(model.loss_trace, model.loss_trace[1:]))


def test_loss_trace_nonincreasing_default_config():
    X, y = fixture(9, n=3000)
    with warnings.catch_warnings():
        warnings.simplefilter("error", LossIncrease)
        m = gbdt.train(X, y, GbdtConfig(n_trees=40, max_depth=6))
    assert len(m.loss_trace) == 41
    assert all(b <= a for a, b in zip(m.loss_trace, m.loss_trace[1:]))


def test_unit_weight_equals_unweighted_bitwise():
    X, y = fixture(5, n=500)
    a = gbdt.train(X, y, GbdtConfig(n_trees=10, max_depth=4, scale_pos_weight=1.0))
    b = gbdt.train(X, y, GbdtConfig(n_trees=10, max_depth=4, scale_pos_weight=None))
    for ta, tb in zip(a.trees, b.trees):
        for name in ("feature", "threshold", "left", "right", "value"):
            assert getattr(ta, name).tobytes() == getattr(tb, name).tobytes()
    assert np.array(a.loss_trace).tobytes() == np.array(b.loss_trace).tobytes()
    R = np.random.default_rng(0).normal(size=(1000, 4))
    assert a.predict_proba(R).tobytes() == b.predict_proba(R).tobytes()


def test_weighting_changes_the_model():
    X, y = fixture(5, n=500)
    a = gbdt.train(X, y, GbdtConfig(n_trees=3, max_depth=3, scale_pos_weight=1000.0))
    b = gbdt.train(X, y, GbdtConfig(n_trees=3, max_depth=3, scale_pos_weight=None))
    assert a.predict_proba(X).mean() > b.predict_proba(X).mean()


def test_separable_stump():
    x = np.array([0.1, 0.2, 0.3, 0.45, 0.55, 0.7, 0.9])
    y = x > 0.5
    m = gbdt.train(x[:, None], y, GbdtConfig(n_trees=1, max_depth=1, scale_pos_weight=None, min_child_hessian=0))
    t = m.trees[0]
    assert t.feature[0] == 0
    assert 0.45 < t.threshold[0] <= 0.55
    p = m.predict_proba(x[:, None])
    assert np.all(p[y] > 0.5) and np.all(p[~y] < 0.5)
    assert m.predict_proba(np.array([0.8])) > 0.5


def test_empty_ensemble_is_half():
    m = GbdtModel([], 0.0, 3)
    assert m.predict_proba(np.zeros((4, 3))).tolist() == [0.5] * 4


def test_batch_equals_rows_bitwise():
    X, y = fixture(4, n=400)
    m = gbdt.train(X, y, GbdtConfig(n_trees=20, max_depth=5))
    R = np.random.default_rng(1).normal(size=(300, 4)) * 3
    batch = m.predict_proba(R)
    rows = np.array([m.predict_proba(r) for r in R])
    assert batch.tobytes() == rows.tobytes()
    # numpy tree walk agrees with the compiled one
    ref = gbdt.sigmoid(sum(t.predict(R) for t in m.trees))
    assert np.array_equal(ref, batch)


def test_probabilities_strictly_inside_unit_interval():
    X, y = fixture(4, n=400)
    m = gbdt.train(X, y, GbdtConfig(n_trees=30, max_depth=6, learning_rate=1.0))
    p = m.predict_proba(np.vstack([X, X * 1e6]))
    assert np.all((p > 0) & (p < 1))
    assert np.all((gbdt.sigmoid(np.array([-1e4, 1e4])) > 0) & (gbdt.sigmoid(np.array([-1e4, 1e4])) < 1))


@pytest.fixture(scope="module")
def model():
    X, y = fixture(6, n=400)
    return gbdt.train(X, y, GbdtConfig(n_trees=15, max_depth=4), encoding=LabelEncoding({"NTLM": 1}))


class TestSerialization:

    def test_round_trip(self, model, tmp_path):
        p = tmp_path / "m.lmgb"
        gbdt.save_file(model, p)
        assert p.read_bytes()[:4] == b"LMGB"
        m2 = gbdt.load_file(p)
        R = np.random.default_rng(2).normal(size=(1000, 4)) * 2
        assert m2.predict_proba(R).tobytes() == model.predict_proba(R).tobytes()
        assert m2.encoding == model.encoding and m2.loss_trace == model.loss_trace
        for a, b in zip(model.trees, m2.trees):
            assert a.threshold.tobytes() == b.threshold.tobytes() and a.value.tobytes() == b.value.tobytes()
        assert gbdt.save(m2) == gbdt.save(model)

    def test_truncated(self, model):
        data = gbdt.save(model)
        for cut in (3, 10, 40, len(data) // 2, len(data) - 1):
            with pytest.raises(CorruptModel):
                gbdt.load(data[:cut])

    def test_wrong_magic(self, model):
        with pytest.raises(CorruptModel):
            gbdt.load(b"LMNN" + gbdt.save(model)[4:])

    def test_version(self, model):
        data = bytearray(gbdt.save(model))
        data[4] = 99
        with pytest.raises(VersionMismatch):
            gbdt.load(bytes(data))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**9))
    def test_random_corruption_never_crashes(self, model, seed):
        data = bytearray(gbdt.save(model))
        rng = np.random.default_rng(seed)
        for i in rng.integers(5, len(data), 4):
            data[i] ^= int(rng.integers(1, 256))
        try:
            m = gbdt.load(bytes(data))
        except (CorruptModel, VersionMismatch):
            return
        m.predict_proba(np.zeros((2, 4)))


def test_errors():
    X, y = fixture(0)
    with pytest.raises(DegenerateData):
        gbdt.train(X, np.zeros(len(X), bool))
    bad = X.copy()
    bad[3, 1] = np.nan
    with pytest.raises(NonFiniteFeature):
        gbdt.train(bad, y)
    m = gbdt.train(X, y, GbdtConfig(n_trees=1))
    with pytest.raises(DimensionMismatch):
        m.predict_proba(np.zeros((2, 5)))
    with pytest.raises(NonFiniteFeature):
        m.predict_proba(np.full((1, 4), np.inf))
    with pytest.raises(ValueError):
        GbdtConfig(learning_rate=0)
    with pytest.raises(ValueError):
        GbdtConfig(scale_pos_weight=-1)


def test_quantile_edges_are_training_values():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5000, 2))
    edges = gbdt.bin_edges(X, 64, sample_rows=2000, seed=3)
    for j, e in enumerate(edges):
        assert len(e) <= 64 and np.all(np.diff(e) > 0)
        assert np.all(np.isin(e, X[:, j]))
    B = gbdt.apply_bins(X, edges)
    assert B.max() < 64
    m = gbdt.train(X, X[:, 0] + X[:, 1] > 1, GbdtConfig(n_trees=5, max_bins=64))
    assert m.predict_proba(X).shape == (5000,)
