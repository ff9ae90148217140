"""User-disjoint train/test splits and model-ready matrices.

Users are stratified by how many malicious records they carry, then
assigned within each stratum by a seeded hash of the user id, so the same
user lands on the same side whatever other users are present.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .features import FEATURE_NAMES, LabelEncoding, fit_label_encoding
from .table import FeatureTable

STRATA = ("0", "1", "2-5", ">5")


class InsufficientUsers(UserWarning):
    """A stratum had fewer than two users and went wholly to train."""


class UnknownUser(KeyError):
    pass


def stratum_of(malicious_count: int) -> str:
    if malicious_count <= 0:
        return "0"
    if malicious_count == 1:
        return "1"
    return "2-5" if malicious_count <= 5 else ">5"


def user_hash(user: Optional[str], seed: int) -> bytes:
    name = "?" if user is None else user
    return hashlib.blake2b(f"{seed}:{name}".encode("utf-8"), digest_size=8).digest()


@dataclass
class SplitManifest:
    train_users: list
    test_users: list
    seed: int
    ratio: float
    strata: list = field(default_factory=list)

    def __post_init__(self):
        self._train = set(self.train_users)
        self._test = set(self.test_users)

    def side(self, user) -> str:
        if user in self._train:
            return "train"
        if user in self._test:
            return "test"
        raise UnknownUser(user)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.ratio,
            "strata": self.strata,
            "train_users": self.train_users,
            "test_users": self.test_users,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(d["train_users"], d["test_users"], int(d["seed"]), float(d["ratio"]), d.get("strata", []))


def _sort_key(user):
    return (user is None, "" if user is None else user)


def _allocate(sizes: dict, ratio: float, target: int) -> dict:
    """Train counts per stratum: within one of ``ratio * n`` and inside [1, n-1]."""
    alloc = {}
    room = []
    for name, n in sizes.items():
        exact = ratio * n
        lo = min(max(1, math.floor(exact)), n - 1)
        hi = max(min(n - 1, math.ceil(exact)), lo)
        alloc[name] = lo
        room.append((-(exact - math.floor(exact)), STRATA.index(name), name, hi))
    rest = target - sum(alloc.values())
    for _, _, name, hi in sorted(room):
        if rest <= 0:
            break
        if alloc[name] < hi:
            alloc[name] += 1
            rest -= 1
    return alloc


def split_by_user(table: FeatureTable, ratio: float = 0.8, seed: int = 0) -> SplitManifest:
    """Stratified user split; deterministic in ``seed``."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n_users = len(table.users)
    counts = np.bincount(table["src_user"], minlength=n_users)
    mal = np.bincount(table["src_user"], weights=table["is_malicious"].astype(np.float64), minlength=n_users)
    members: dict = {s: [] for s in STRATA}
    mal_events: dict = {s: 0 for s in STRATA}
    for code in np.flatnonzero(counts).tolist():
        m = int(mal[code])
        members[stratum_of(m)].append(table.users[code])
        mal_events[stratum_of(m)] += m
    total = sum(len(v) for v in members.values())
    fixed = {s: len(v) for s, v in members.items() if 0 < len(v) < 2}
    sizes = {s: len(v) for s, v in members.items() if len(v) >= 2}
    target = math.floor(ratio * total + 0.5) - sum(fixed.values())
    alloc = _allocate(sizes, ratio, target)
    alloc.update(fixed)

    train, test, report = [], [], []
    for s in STRATA:
        users = sorted(members[s], key=lambda u: (user_hash(u, seed), _sort_key(u)))
        k = alloc.get(s, 0)
        train.extend(users[:k])
        test.extend(users[k:])
        entry = {"stratum": s, "users": len(users), "train": k, "test": len(users) - k,
                 "malicious_events": mal_events[s], "insufficient_users": s in fixed}
        report.append(entry)
        if s in fixed:
            warnings.warn(f"stratum {s} has {len(users)} user(s); assigned to train", InsufficientUsers)
    return SplitManifest(sorted(train, key=_sort_key), sorted(test, key=_sort_key), seed, ratio, report)


@dataclass
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardization":
        return cls(X.mean(axis=0), X.std(axis=0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        scale = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (X - self.mean) / scale, 0.0)

    def to_dict(self) -> dict:
        return {"features": list(FEATURE_NAMES), "mean": self.mean.tolist(), "std": self.std.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def from_json(cls, text: str) -> "Standardization":
        return cls.from_dict(json.loads(text))


@dataclass
class FeatureMatrix:
    """Rows of one split, raw or standardized, in input order."""

    table: FeatureTable
    X: np.ndarray
    y: np.ndarray
    standardization: Optional[Standardization] = None

    def __len__(self):
        return len(self.y)

    @property
    def event_ids(self) -> np.ndarray:
        return self.table["event_id"]


def side_mask(table: FeatureTable, manifest: SplitManifest) -> np.ndarray:
    """Boolean per row: True for train. Raises UnknownUser."""
    lut = np.zeros(len(table.users), dtype=bool)
    present = np.zeros(len(table.users), dtype=bool)
    present[np.unique(table["src_user"])] = True
    for code in np.flatnonzero(present).tolist():
        lut[code] = manifest.side(table.users[code]) == "train"
    return lut[table["src_user"]]


def fit_train_encoding(table: FeatureTable, manifest: SplitManifest) -> LabelEncoding:
    """Label encoding fitted on the auth types of training rows only."""
    train = table["auth_type"][side_mask(table, manifest)]
    codes, freq = np.unique(train[train >= 0], return_counts=True)
    values = []
    for c, f in zip(codes.tolist(), freq.tolist()):
        values.extend([table.auth_types[c]] * f)
    return fit_label_encoding(values)


def assemble(
    table: FeatureTable,
    manifest: SplitManifest,
    standardize: bool = False,
    encoding: Optional[LabelEncoding] = None,
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Split rows by user; no resampling. Standardization is fitted on train."""
    if encoding is not None:
        table = table.with_encoding(encoding)
    mask = side_mask(table, manifest)
    parts = []
    for m in (mask, ~mask):
        sub = table.take(np.flatnonzero(m))
        parts.append((sub, sub.feature_matrix(), sub.labels()))
    (tr, Xtr, ytr), (te, Xte, yte) = parts
    std = None
    if standardize:
        std = Standardization.fit(Xtr)
        Xtr, Xte = std.apply(Xtr), std.apply(Xte)
    return FeatureMatrix(tr, Xtr, ytr, std), FeatureMatrix(te, Xte, yte, std)
