"""Importance measures and evaluation statistics.

GI and CWRI turn attention vectors into global and class-wise importance;
ABC, DA and WDA score a remove-and-retrain curve; rank correlations measure
ranking stability across runs; F1/Jaccard/IACC compare binarised CWRI with a
ground truth; Calinski-Harabasz measures how well attention vectors cluster by
class.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .synthgen import GroundTruthMask


@dataclass
class GiReport:
    gi: np.ndarray
    rank_desc: np.ndarray
    source_run_id: str = ""


@dataclass
class CwriMatrix:
    scores: np.ndarray
    binarized: np.ndarray


@dataclass
class RoarCurve:
    x: np.ndarray
    truth_acc: np.ndarray
    inverse_acc: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.truth_acc = np.asarray(self.truth_acc, dtype=np.float64)
        self.inverse_acc = np.asarray(self.inverse_acc, dtype=np.float64)
        if not (self.x.shape == self.truth_acc.shape == self.inverse_acc.shape):
            raise ValueError("ROAR series must have equal length")
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("ROAR x must be strictly increasing")


def rank_descending(scores) -> np.ndarray:
    """Indices by descending score; ties go to the lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def global_importance(attentions, source_run_id: str = "") -> GiReport:
    a = np.asarray(attentions, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("global importance needs a non-empty (N, D) array")
    gi = a.mean(axis=0)
    return GiReport(gi=gi, rank_desc=rank_descending(gi), source_run_id=source_run_id)


def class_means(attentions, labels, n_classes: int) -> np.ndarray:
    a = np.asarray(attentions, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.zeros((n_classes, a.shape[1]))
    for c in range(n_classes):
        sel = labels == c
        if not sel.any():
            raise ValueError(f"class {c} has no instances")
        out[c] = a[sel].mean(axis=0)
    return out


def cwri(prototypes) -> CwriMatrix:
    """Each class prototype minus the mean of the other classes' prototypes."""
    p = np.asarray(prototypes, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError("CWRI needs prototypes for at least two classes")
    c = p.shape[0]
    others = (p.sum(axis=0, keepdims=True) - p) / (c - 1)
    scores = p - others
    return CwriMatrix(scores=scores, binarized=scores >= 0)


def abc(curve: RoarCurve | None = None, *, truth=None, inverse=None) -> float:
    """Trapezoid area between inverse and truth curves, x scaled to [0, 1]."""
    if curve is not None:
        truth, inverse = curve.truth_acc, curve.inverse_acc
    truth = np.asarray(truth, dtype=np.float64)
    inverse = np.asarray(inverse, dtype=np.float64)
    if truth.shape != inverse.shape or truth.ndim != 1:
        raise ValueError("truth and inverse curves must be aligned 1-D series")
    if truth.size < 2:
        raise ValueError("need at least two points")
    gap = inverse - truth
    dx = 1.0 / (truth.size - 1)
    return float(0.5 * dx * np.sum(gap[:-1] + gap[1:]))


def drop_in_accuracy(base_acc: float, k_acc: float) -> float:
    if base_acc == 0:
        raise ZeroDivisionError("base accuracy is zero")
    return 100.0 * (base_acc - k_acc) / base_acc


def k_removed(d: int, fraction: float = 0.2) -> int:
    """Number of features that make up ``fraction`` of ``d`` (at least one)."""
    return max(1, int(round(fraction * d)))


def wda_weights(d: int) -> np.ndarray:
    if d < 2:
        raise ValueError("WDA needs at least two features")
    return (d - np.arange(d) - 1) / (d - 1)


def weighted_drop(base_acc: float, accs, d: int | None = None) -> float:
    accs = np.asarray(accs, dtype=np.float64)
    d = accs.size if d is None else d
    if accs.shape != (d,):
        raise ValueError(f"need {d} accuracies, one per removal count, got {accs.size}")
    return float(np.sum((base_acc - accs) * wda_weights(d)))


def _positions(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    pos = np.empty_like(perm)
    pos[perm] = np.arange(perm.size)
    return pos


def spearman(x, y) -> float:
    """Rank-difference formula; inputs are tie-free rank vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    d2 = np.sum((x - y) ** 2)
    return float(1.0 - 6.0 * d2 / (n * (n * n - 1)))


def kendall_tau_b(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, k=1)
    sx, sy = dx[iu], dy[iu]
    s = float(np.sum(sx * sy))
    n0 = sx.size
    tx = n0 - np.count_nonzero(sx)
    ty = n0 - np.count_nonzero(sy)
    denom = math.sqrt((n0 - tx) * (n0 - ty))
    return s / denom if denom else float("nan")


def rank_correlations(rankings: Sequence) -> tuple[float, float]:
    """Mean pairwise (Spearman, Kendall tau-b) over rankings given as
    permutations of feature indices, most important first."""
    ranks = [np.asarray(r, dtype=np.int64) for r in rankings]
    if len(ranks) < 2:
        raise ValueError("need at least two rankings")
    if len({r.size for r in ranks}) != 1:
        raise ValueError("rankings differ in length")
    pos = [_positions(r) for r in ranks]
    pairs = list(combinations(range(len(pos)), 2))
    rs = [spearman(pos[i], pos[j]) for i, j in pairs]
    rk = [kendall_tau_b(pos[i], pos[j]) for i, j in pairs]
    return float(np.mean(rs)), float(np.mean(rk))


def _binary_scores(pred: np.ndarray, gt: np.ndarray) -> dict:
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    tn = int(np.sum(~pred & ~gt))
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    jac = tp / (tp + fp + fn) if (tp + fp + fn) else 0.0
    return {"f1": f1, "jaccard": jac, "iacc": (tp + tn) / pred.size, "tp": tp, "fp": fp, "fn": fn, "tn": tn}


def gt_agreement(pred, gt: GroundTruthMask) -> dict:
    """Score a binarised CWRI matrix against both ground-truth variants and
    report the one with the higher F1 (variant A on ties)."""
    pred = np.asarray(pred.binarized if isinstance(pred, CwriMatrix) else pred, dtype=bool)
    if pred.shape != gt.variant_a.shape or pred.shape != gt.variant_b.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.variant_a.shape}")
    a = _binary_scores(pred, gt.variant_a)
    b = _binary_scores(pred, gt.variant_b)
    chosen = "B" if b["f1"] > a["f1"] else "A"
    best = b if chosen == "B" else a
    return {"A": a, "B": b, "selected": chosen, "f1": best["f1"], "jaccard": best["jaccard"], "iacc": best["iacc"]}


def calinski_harabasz(points, labels) -> float:
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n, k = X.shape[0], classes.size
    if k < 2 or n <= k:
        raise ValueError("Calinski-Harabasz needs at least two classes and more points than classes")
    mean = X.mean(axis=0)
    between = 0.0
    within = 0.0
    for c in classes:
        pts = X[labels == c]
        mu = pts.mean(axis=0)
        between += pts.shape[0] * float(np.sum((mu - mean) ** 2))
        within += float(np.sum((pts - mu) ** 2))
    if within == 0.0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


# -- serialisation ------------------------------------------------------------
def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_metric_rows(path, rows: Sequence[dict]) -> None:
    """CSV with one row per (run, fold, metric)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "fold", "metric", "value"])
        for r in rows:
            w.writerow([r.get("run", ""), r.get("fold", ""), r["metric"], repr(float(r["value"]))])
