"""Exact Shapley attributions by enumerating every feature coalition.

The value of a coalition S for row x is the mean model output over the
background rows b, each with the features in S replaced by x's values.
With 8 features that is 256 coalitions, cheap enough to do exactly for
either classifier.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .features import FEATURE_NAMES

MAX_FEATURES = 16
EFFICIENCY_TOL = 1e-9

Model = Callable[[np.ndarray], np.ndarray]


class TooManyFeatures(ValueError):
    pass


class EmptyBackground(ValueError):
    pass


class EfficiencyViolation(AssertionError):
    pass


@dataclass
class Attribution:
    event_id: Optional[int]
    phi: np.ndarray
    base_value: float
    fx: float
    feature_names: tuple = FEATURE_NAMES

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "fx": self.fx,
            "base_value": self.base_value,
            "phi": {n: float(v) for n, v in zip(self.feature_names, self.phi)},
        }


def coalition_masks(n: int) -> np.ndarray:
    """Row s is the membership mask of coalition s (bit i set = feature i in S)."""
    s = np.arange(2 ** n)
    return ((s[:, None] >> np.arange(n)) & 1).astype(bool)


def shapley_weights(n: int) -> np.ndarray:
    """|S|!(n-|S|-1)!/n! for |S| = 0..n-1."""
    return np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n) for k in range(n)])


def coalition_values(model: Model, x: np.ndarray, background: np.ndarray, chunk_rows: int = 1 << 18) -> np.ndarray:
    n = len(x)
    masks = coalition_masks(n)
    m = len(background)
    values = np.empty(len(masks))
    step = max(1, chunk_rows // m)
    for lo in range(0, len(masks), step):
        mk = masks[lo:lo + step]
        rows = np.where(mk[:, None, :], x[None, None, :], background[None, :, :]).reshape(-1, n)
        out = np.asarray(model(rows), dtype=np.float64).reshape(len(mk), m)
        values[lo:lo + step] = out.mean(axis=1)
    return values


def shapley_from_values(values: np.ndarray, n: int) -> np.ndarray:
    s = np.arange(2 ** n)
    size = np.bitwise_count(s)
    w = shapley_weights(n)
    phi = np.empty(n)
    for i in range(n):
        without = s[(s >> i) & 1 == 0]
        phi[i] = np.sum(w[size[without]] * (values[without | (1 << i)] - values[without]))
    return phi


def _check(row, background):
    x = np.asarray(row, dtype=np.float64).ravel()
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim != 2 or len(bg) == 0:
        raise EmptyBackground("background sample is empty")
    if bg.shape[1] != len(x):
        raise ValueError(f"background has {bg.shape[1]} columns, row has {len(x)}")
    if len(x) > MAX_FEATURES:
        raise TooManyFeatures(f"{len(x)} features; exact enumeration is limited to {MAX_FEATURES}")
    return x, bg


def explain_local(model: Model, row, background, event_id: Optional[int] = None,
                  feature_names: Sequence[str] = FEATURE_NAMES) -> Attribution:
    """Exact attribution of ``model(row)``; ``model`` maps a 2-D array to scores."""
    x, bg = _check(row, background)
    n = len(x)
    values = coalition_values(model, x, bg)
    phi = shapley_from_values(values, n)
    fx = float(np.asarray(model(x[None, :]), dtype=np.float64).ravel()[0])
    base = float(values[0])
    gap = abs(float(phi.sum()) + base - fx)
    if not gap < EFFICIENCY_TOL:
        raise EfficiencyViolation(f"sum(phi) + base differs from f(x) by {gap:.3g}")
    names = tuple(feature_names) if len(feature_names) == n else tuple(f"x{i}" for i in range(n))
    return Attribution(event_id, phi, base, fx, names)


@dataclass
class GlobalImportance:
    importance: np.ndarray
    feature_names: tuple
    n_rows: int
    n_background: int
    attributions: list = field(default_factory=list, repr=False)

    def ranked(self) -> list:
        order = sorted(range(len(self.importance)), key=lambda i: (-self.importance[i], i))
        return [(self.feature_names[i], float(self.importance[i])) for i in order]

    def to_dict(self) -> dict:
        return {"n_rows": self.n_rows, "n_background": self.n_background,
                "mean_abs_phi": dict(self.ranked())}


def explain_global(model: Model, rows, background, event_ids=None,
                   feature_names: Sequence[str] = FEATURE_NAMES) -> GlobalImportance:
    """Mean absolute Shapley value per feature over ``rows``."""
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("rows must be a non-empty 2-D array")
    ids = [None] * len(X) if event_ids is None else list(event_ids)
    atts = [explain_local(model, x, background, e, feature_names) for x, e in zip(X, ids)]
    imp = np.mean(np.abs(np.stack([a.phi for a in atts])), axis=0)
    return GlobalImportance(imp, atts[0].feature_names, len(X), len(background), atts)


def sample_background(X: np.ndarray, size: int = 1024, seed: int = 0) -> np.ndarray:
    """Seeded uniform sample of rows without replacement."""
    X = np.asarray(X)
    if len(X) <= size:
        return X.copy()
    idx = np.sort(np.random.default_rng(seed).choice(len(X), size=size, replace=False))
    return X[idx]


def write_local_json(attributions: Sequence[Attribution], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump([a.to_dict() for a in attributions], fh, indent=1)
        fh.write("\n")


def write_global_csv(result: GlobalImportance, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "mean_abs_phi"])
        for name, v in result.ranked():
            w.writerow([name, repr(v)])
