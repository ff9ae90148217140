"""Recall and false-positive rate at a threshold and along a sweep.

A row is predicted malicious when its score is strictly greater than the
threshold. The detection target is recall above 70% with a false-positive
rate below 0.005%.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

RECALL_FLOOR = 0.70
FPR_CEILING = 0.00005


class EmptyInput(ValueError):
    pass


class EmptyGrid(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    threshold: float
    true_positives: int
    false_negatives: int
    false_positives: int
    true_negatives: int
    recall: float
    fpr: float
    meets_criteria: bool
    no_positives: bool = False
    no_negatives: bool = False

    @property
    def total(self) -> int:
        return self.true_positives + self.false_negatives + self.false_positives + self.true_negatives

    def to_dict(self) -> dict:
        return asdict(self)


def _report(threshold, tp, fn, fp, tn) -> EvalReport:
    pos, neg = tp + fn, fp + tn
    recall = tp / pos if pos else 0.0
    fpr = fp / neg if neg else 0.0
    return EvalReport(float(threshold), int(tp), int(fn), int(fp), int(tn), recall, fpr,
                      bool(recall > RECALL_FLOOR and fpr < FPR_CEILING), pos == 0, neg == 0)


def _inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if len(s) == 0:
        raise EmptyInput("no scores to evaluate")
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    return s, y


def evaluate(scores, labels, threshold: float = 0.5) -> EvalReport:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    s, y = _inputs(scores, labels)
    pred = s > threshold
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    return _report(threshold, tp, int(np.count_nonzero(y)) - tp, fp, int(np.count_nonzero(~y)) - fp)


def default_grid(step: float = 0.01) -> list:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def threshold_sweep(scores, labels, grid: Optional[Sequence[float]] = None) -> list:
    """One report per threshold; recall and fpr never increase along the grid."""
    grid = default_grid() if grid is None else [float(g) for g in grid]
    if not grid:
        raise EmptyGrid("threshold grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be sorted ascending")
    s, y = _inputs(scores, labels)
    pos = np.sort(s[y])
    neg = np.sort(s[~y])
    thr = np.asarray(grid)
    # rows with score > thr are those right of searchsorted(..., side="right")
    tp = len(pos) - np.searchsorted(pos, thr, side="right")
    fp = len(neg) - np.searchsorted(neg, thr, side="right")
    return [_report(t, a, len(pos) - a, b, len(neg) - b) for t, a, b in zip(grid, tp.tolist(), fp.tolist())]


def write_sweep_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,recall,fpr,tp,fp,tn,fn\n")
        for r in reports:
            fh.write(f"{r.threshold!r},{r.recall!r},{r.fpr!r},{r.true_positives},"
                     f"{r.false_positives},{r.true_negatives},{r.false_negatives}\n")


def summary(report: EvalReport, model: str = "") -> dict:
    d = {"model": model, **report.to_dict()}
    d["criteria"] = {"recall_greater_than": RECALL_FLOOR, "fpr_less_than": FPR_CEILING}
    return d


def write_summary_json(reports: dict, path) -> None:
    """``reports`` maps model name to its EvalReport at the operating threshold."""
    doc = {name: summary(r, name) for name, r in sorted(reports.items())}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
