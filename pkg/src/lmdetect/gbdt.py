"""Second-order gradient boosted trees for weighted logistic loss.

Histogram trainer: every feature is cut into at most ``max_bins`` bins
whose lower edges are training values, and split search scans bin
boundaries. A row goes left when ``x < threshold``; the threshold of a
split is the smallest training value on the right, so with one bin per
distinct value the trainer picks the same splits as an exact greedy scan.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .features import LabelEncoding

logger = logging.getLogger(__name__)

MAGIC = b"LMGB"
VERSION = 1


class DegenerateData(ValueError):
    pass


class NonFiniteFeature(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class CorruptModel(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class LossIncrease(UserWarning):
    pass


@dataclass
class GbdtConfig:
    n_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    lambda_l2: float = 1.0
    gamma_min_gain: float = 0.0
    min_child_hessian: float = 1.0
    # None trains without any example weights at all
    scale_pos_weight: Optional[float] = 1000.0
    max_bins: int = 256
    sample_rows: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.scale_pos_weight is not None and not self.scale_pos_weight > 0:
            raise ValueError("scale_pos_weight must be > 0")
        if not 2 <= self.max_bins <= 65535:
            raise ValueError("max_bins must be in [2, 65535]")
        if self.lambda_l2 < 0 or self.min_child_hessian < 0 or self.gamma_min_gain < 0:
            raise ValueError("lambda_l2, gamma_min_gain and min_child_hessian must be >= 0")


@dataclass
class Tree:
    feature: np.ndarray    # int32, -1 marks a leaf
    threshold: np.ndarray  # float64, x < threshold goes left
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    value: np.ndarray      # float64 leaf output (already scaled by the learning rate)

    def __len__(self):
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = X[rows, np.maximum(f, 0)] < self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def depth(self) -> int:
        def d(i):
            return 0 if self.feature[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)


@dataclass
class GbdtModel:
    trees: list
    base_score_logit: float = 0.0
    feature_count: int = 8
    encoding: Optional[LabelEncoding] = None
    config: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        for t in self.trees:
            inner = t.feature >= 0
            if np.any(t.feature[inner] >= self.feature_count):
                raise CorruptModel("split feature index out of range")
            if not np.all(np.isfinite(t.value[~inner])):
                raise CorruptModel("non-finite leaf weight")

    def _flat(self):
        if getattr(self, "_flat_cache", None) is None:
            offsets = np.cumsum([0] + [len(t) for t in self.trees]).astype(np.int64)
            cat = (lambda name, dt: np.concatenate([getattr(t, name) for t in self.trees]).astype(dt)
                   if self.trees else np.zeros(0, dt))
            self._flat_cache = (offsets, cat("feature", np.int64), cat("threshold", np.float64),
                                cat("left", np.int64), cat("right", np.int64), cat("value", np.float64))
        return self._flat_cache

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(_check_rows(X, self.feature_count))
        return _ensemble_margin(X, float(self.base_score_logit), *self._flat())

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return sigmoid(self.margin(X[None, :]))[0]
        return sigmoid(self.margin(X))


@njit(cache=True)
def _ensemble_margin(X, base, offsets, feat, thr, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        m = base
        for t in range(len(offsets) - 1):
            o = offsets[t]
            nd = 0
            while feat[o + nd] >= 0:
                nd = left[o + nd] if X[i, feat[o + nd]] < thr[o + nd] else right[o + nd]
            m += value[o + nd]
        out[i] = m
    return out


def _check_rows(X, n_features) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise DimensionMismatch(f"expected rows of length {n_features}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("input contains NaN or infinity")
    return X


_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


def _expit(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(z) -> np.ndarray:
    p = _expit(np.asarray(z, dtype=np.float64))
    # keep probabilities inside the open interval even for huge margins
    return np.clip(p, _P_LO, _P_HI)


def weighted_logloss(margin: np.ndarray, y: np.ndarray, w: Optional[np.ndarray]) -> float:
    loss = np.logaddexp(0.0, margin) - y * margin
    # same reductions on both paths, so unit weights reproduce the unweighted value exactly
    if w is None:
        return float(np.sum(loss) / len(loss))
    return float(np.sum(w * loss) / np.sum(w))


# ---- binning ------------------------------------------------------------

def bin_edges(X: np.ndarray, max_bins: int, sample_rows: int = 1_000_000, seed: int = 0) -> list:
    """Per-feature sorted lower bin edges, all of them training values."""
    n = len(X)
    sample = None
    edges = []
    for j in range(X.shape[1]):
        col = X[:, j]
        distinct = np.unique(col)
        if len(distinct) <= max_bins:
            edges.append(distinct)
            continue
        if sample is None:
            if n > sample_rows:
                rng = np.random.default_rng(seed)
                sample = np.sort(rng.choice(n, size=sample_rows, replace=False))
            else:
                sample = np.arange(n)
        q = np.quantile(col[sample], np.arange(max_bins) / max_bins, method="inverted_cdf")
        edges.append(np.unique(q))
    return edges


def apply_bins(X: np.ndarray, edges: list) -> np.ndarray:
    B = np.empty(X.shape, dtype=np.uint16)
    for j, e in enumerate(edges):
        B[:, j] = np.maximum(np.searchsorted(e, X[:, j], side="right") - 1, 0)
    return B


@njit(cache=True)
def _histograms(B, node_of_row, slot_of_node, n_slots, n_bins, g, h):
    n, F = B.shape
    G = np.zeros((n_slots, F, n_bins))
    H = np.zeros((n_slots, F, n_bins))
    C = np.zeros((n_slots, F, n_bins), np.int64)
    for i in range(n):
        s = slot_of_node[node_of_row[i]]
        if s < 0:
            continue
        gi = g[i]
        hi = h[i]
        for f in range(F):
            b = B[i, f]
            G[s, f, b] += gi
            H[s, f, b] += hi
            C[s, f, b] += 1
    return G, H, C


@njit(cache=True)
def _partition(B, node_of_row, split_feat, split_bin, left, right):
    for i in range(len(node_of_row)):
        nd = node_of_row[i]
        f = split_feat[nd]
        if f >= 0:
            node_of_row[i] = left[nd] if B[i, f] < split_bin[nd] else right[nd]


def best_split(G, H, C, lam, gamma, min_child_hessian):
    """Best (gain, feature, bin, GL, HL, GR, HR) over one node's histograms, or None."""
    best = None
    for f in range(G.shape[0]):
        nz = np.flatnonzero(C[f])
        if len(nz) < 2:
            continue
        g = G[f, nz]
        h = H[f, nz]
        GL = np.cumsum(g)[:-1]
        HL = np.cumsum(h)[:-1]
        Gt = GL[-1] + g[-1]
        Ht = HL[-1] + h[-1]
        GR = Gt - GL
        HR = Ht - HL
        gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - Gt * Gt / (Ht + lam)) - gamma
        ok = (HL >= min_child_hessian) & (HR >= min_child_hessian) & (gain > 0)
        if not ok.any():
            continue
        cand = np.flatnonzero(ok)
        k = cand[np.argmax(gain[cand])]
        if best is None or gain[k] > best[0]:
            best = (float(gain[k]), f, int(nz[k + 1]), GL[k], HL[k], GR[k], HR[k])
    return best


def _grow_tree(B, edges, g, h, config: GbdtConfig):
    n = len(B)
    n_bins = max(len(e) for e in edges)
    lam, eta = config.lambda_l2, config.learning_rate
    cap = 2 ** (config.max_depth + 1)
    feat = np.full(cap, -1, np.int32)
    sbin = np.zeros(cap, np.int32)
    thr = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap)
    GH = {0: (g.sum(), h.sum())}
    node_of_row = np.zeros(n, np.int32)
    frontier = [0]
    n_nodes = 1
    for _depth in range(config.max_depth):
        if not frontier:
            break
        slot = np.full(cap, -1, np.int32)
        slot[frontier] = np.arange(len(frontier), dtype=np.int32)
        Gh, Hh, Ch = _histograms(B, node_of_row, slot, len(frontier), n_bins, g, h)
        nxt = []
        for s, nd in enumerate(frontier):
            sp = best_split(Gh[s], Hh[s], Ch[s], lam, config.gamma_min_gain, config.min_child_hessian)
            if sp is None:
                continue
            _, f, b, GL, HL, GR, HR = sp
            feat[nd], sbin[nd], thr[nd] = f, b, edges[f][b]
            left[nd], right[nd] = n_nodes, n_nodes + 1
            GH[n_nodes], GH[n_nodes + 1] = (GL, HL), (GR, HR)
            nxt += [n_nodes, n_nodes + 1]
            n_nodes += 2
        if nxt:
            _partition(B, node_of_row, feat, sbin, left, right)
        frontier = nxt
    for nd in range(n_nodes):
        if feat[nd] < 0:
            G, H = GH[nd]
            value[nd] = -G / (H + lam) * eta
    tree = _preorder(feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes])
    return tree, value[node_of_row]


def _preorder(feat, thr, left, right, value) -> Tree:
    order = []
    stack = [0]
    while stack:
        nd = stack.pop()
        order.append(nd)
        if feat[nd] >= 0:
            stack.append(right[nd])
            stack.append(left[nd])
    new = np.empty(len(feat), np.int32)
    new[order] = np.arange(len(order), dtype=np.int32)
    order = np.array(order)
    f = feat[order].astype(np.int32)
    inner = f >= 0
    L = np.where(inner, new[np.maximum(left[order], 0)], -1).astype(np.int32)
    R = np.where(inner, new[np.maximum(right[order], 0)], -1).astype(np.int32)
    return Tree(f, np.where(inner, thr[order], 0.0), L, R, np.where(inner, 0.0, value[order]))


def example_weights(y: np.ndarray, scale_pos_weight: Optional[float]) -> Optional[np.ndarray]:
    if scale_pos_weight is None:
        return None
    return np.where(y, float(scale_pos_weight), 1.0)


def train(X: np.ndarray, y: np.ndarray, config: Optional[GbdtConfig] = None,
          encoding: Optional[LabelEncoding] = None) -> GbdtModel:
    """Boost ``config.n_trees`` trees on raw features ``X`` and boolean labels ``y``."""
    config = config or GbdtConfig()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise DegenerateData("training matrix is empty")
    X = _check_rows(X, X.shape[1])
    yb = np.asarray(y).astype(bool)
    if len(yb) != len(X):
        raise DimensionMismatch("labels and rows differ in length")
    if yb.all() or not yb.any():
        raise DegenerateData("training data must contain both classes")
    yf = yb.astype(np.float64)
    w = example_weights(yb, config.scale_pos_weight)
    edges = bin_edges(X, config.max_bins, config.sample_rows, config.seed)
    B = apply_bins(X, edges)
    margin = np.zeros(len(X))
    trace = [weighted_logloss(margin, yf, w)]
    trees = []
    for r in range(config.n_trees):
        p = _expit(margin)
        if w is None:
            g = p - yf
            h = p * (1.0 - p)
        else:
            g = w * (p - yf)
            h = w * (p * (1.0 - p))
        tree, delta = _grow_tree(B, edges, g, h, config)
        trees.append(tree)
        margin = margin + delta
        trace.append(weighted_logloss(margin, yf, w))
        if trace[-1] > trace[-2]:
            warnings.warn(f"training loss rose in round {r + 1}: {trace[-2]!r} -> {trace[-1]!r}", LossIncrease)
        logger.debug("round %d loss %.6g", r + 1, trace[-1])
    return GbdtModel(trees, 0.0, X.shape[1], encoding, asdict(config), trace)


def predict_proba(model: GbdtModel, X) -> np.ndarray:
    return model.predict_proba(X)


# ---- serialization ------------------------------------------------------

def save(model: GbdtModel) -> bytes:
    meta = json.dumps({
        "config": model.config,
        "encoding": None if model.encoding is None else model.encoding.table,
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BIdI", VERSION, model.feature_count, model.base_score_logit, len(model.trees)))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for t in model.trees:
        buf.write(struct.pack("<I", len(t)))
        buf.write(t.feature.astype("<i4").tobytes())
        buf.write(t.threshold.astype("<f8").tobytes())
        buf.write(t.left.astype("<i4").tobytes())
        buf.write(t.right.astype("<i4").tobytes())
        buf.write(t.value.astype("<f8").tobytes())
    buf.write(struct.pack("<I", len(model.loss_trace)))
    buf.write(np.asarray(model.loss_trace, dtype="<f8").tobytes())
    return buf.getvalue()


def load(data: bytes) -> GbdtModel:
    if len(data) < 5 or data[:4] != MAGIC:
        raise CorruptModel("not a GBDT model (bad magic)")
    if data[4] != VERSION:
        raise VersionMismatch(f"model version {data[4]}, expected {VERSION}")
    try:
        off = 4
        _, n_feat, base, n_trees = struct.unpack_from("<BIdI", data, off)
        off += struct.calcsize("<BIdI")
        (mlen,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + mlen > len(data):
            raise CorruptModel("truncated metadata")
        meta = json.loads(data[off:off + mlen].decode("utf-8"))
        off += mlen
        trees = []
        for _ in range(n_trees):
            (m,) = struct.unpack_from("<I", data, off)
            off += 4
            need = m * (4 + 8 + 4 + 4 + 8)
            if off + need > len(data):
                raise CorruptModel("truncated tree")
            arrs = []
            for dt in ("<i4", "<f8", "<i4", "<i4", "<f8"):
                a = np.frombuffer(data, dtype=dt, count=m, offset=off)
                off += a.nbytes
                arrs.append(a.astype(dt[1:]))
            t = Tree(*arrs)
            inner = np.flatnonzero(t.feature >= 0)
            kids = np.concatenate([t.left[inner], t.right[inner]])
            parents = np.concatenate([inner, inner])
            # preorder numbering: children always come after their parent, so walks terminate
            if m == 0 or np.any(kids <= parents) or np.any(kids >= m):
                raise CorruptModel("bad child index")
            trees.append(t)
        (nl,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + 8 * nl != len(data):
            raise CorruptModel("unexpected trailing or missing bytes")
        trace = np.frombuffer(data, dtype="<f8", count=nl, offset=off).astype(float).tolist()
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CorruptModel):
            raise
        raise CorruptModel(f"cannot decode model: {exc}") from None
    enc = meta.get("encoding")
    return GbdtModel(trees, base, n_feat, None if enc is None else LabelEncoding(enc),
                     meta.get("config", {}), trace)


def save_file(model: GbdtModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save(model))


def load_file(path) -> GbdtModel:
    with open(path, "rb") as fh:
        return load(fh.read())


def write_loss_trace(model: GbdtModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("round,weighted_train_loss\n")
        for r, v in enumerate(model.loss_trace):
            fh.write(f"{r},{v!r}\n")
