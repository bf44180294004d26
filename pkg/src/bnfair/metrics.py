"""Subgroup fairness metrics over multi-attribute predictions.

For a task t and a conditioning attribute c (t != c)::

    gap(t, c)   = |F1(t | c) - F1(t | not c)|
    worst(t, c) = min(F1(t | c), F1(t | not c))

Per-c scores average the valid cells over t, and the headline "all" number is
the median of the per-c scores.  A cell is invalid when either subgroup's F1
is undefined (tp = fp = fn = 0, which includes an empty subgroup).
"""
import json
import struct
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class PredictionLog:
    scores: np.ndarray
    labels: np.ndarray
    names: list

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 2:
            raise MetricError(f"scores {self.scores.shape} and labels {self.labels.shape} disagree")
        if len(self.names) != self.scores.shape[1]:
            raise MetricError("one attribute name per column required")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise MetricError("labels must be 0 or 1")
        self.labels = self.labels.astype(np.int8)

    @property
    def num_tasks(self):
        return self.scores.shape[1]


def f1_from_counts(tp, fp, fn):
    """F1 = 2tp / (2tp + fp + fn); None when tp = fp = fn = 0."""
    denom = 2 * tp + fp + fn
    if denom == 0:
        return None
    return 2 * tp / denom


def _f1_array(tp, fp, fn):
    denom = 2 * tp + fp + fn
    defined = denom > 0
    f1 = np.full(tp.shape, np.nan)
    f1[defined] = 2 * tp[defined] / denom[defined]
    return f1, defined


@dataclass
class ThresholdVector:
    thresholds: np.ndarray
    train_f1: np.ndarray


SENTINEL = float(np.nextafter(1.0, 2.0))


def calibrate_thresholds(log):
    """Per-task threshold maximizing F1 with rule ``score >= threshold``.

    Candidates are the task's unique scores plus a sentinel just above 1.0
    (predict nothing); the smallest threshold reaching the maximum wins.
    """
    k = log.num_tasks
    thresholds, best = np.empty(k), np.empty(k)
    for t in range(k):
        s = log.scores[:, t]
        y = log.labels[:, t] == 1
        n_pos = int(y.sum())
        if n_pos == 0:
            raise MetricError(f"task {log.names[t]!r} has no positive labels; F1 undefined")
        cand = np.append(np.unique(s), SENTINEL)
        sorted_all = np.sort(s)
        sorted_pos = np.sort(s[y])
        predicted = s.size - np.searchsorted(sorted_all, cand, side="left")
        tp = n_pos - np.searchsorted(sorted_pos, cand, side="left")
        f1 = 2 * tp / (predicted + n_pos)
        j = int(np.argmax(f1))
        thresholds[t], best[t] = cand[j], f1[j]
    return ThresholdVector(thresholds, best)


@dataclass
class PairMetrics:
    """Arrays indexed [t, c]; diagonal and invalid cells hold NaN."""

    names: list
    f1_given_c: np.ndarray
    f1_given_not_c: np.ndarray
    gap: np.ndarray
    worst: np.ndarray
    valid: np.ndarray

    @property
    def num_cells(self):
        k = len(self.names)
        return k * (k - 1)

    def cells(self):
        k = len(self.names)
        for t in range(k):
            for c in range(k):
                if t != c:
                    yield t, c


def pairwise_metrics(log, thresholds):
    k = log.num_tasks
    if k < 2:
        raise MetricError("pairwise metrics need at least two attributes")
    th = thresholds.thresholds if isinstance(thresholds, ThresholdVector) else np.asarray(thresholds)
    pred = (log.scores >= th).astype(np.int64)
    y = log.labels.astype(np.int64)
    hit, false_pos, miss = pred * y, pred * (1 - y), (1 - pred) * y
    sides = []
    for cond in (y, 1 - y):
        # [c, t] counts restricted to samples with attribute c true (resp. false)
        f1, defined = _f1_array(cond.T @ hit, cond.T @ false_pos, cond.T @ miss)
        sides.append((f1.T, defined.T))
    (f_c, d_c), (f_nc, d_nc) = sides
    valid = d_c & d_nc
    np.fill_diagonal(valid, False)
    f_c = np.where(np.eye(k, dtype=bool), np.nan, f_c)
    f_nc = np.where(np.eye(k, dtype=bool), np.nan, f_nc)
    gap = np.where(valid, np.abs(f_c - f_nc), np.nan)
    worst = np.where(valid, np.minimum(f_c, f_nc), np.nan)
    return PairMetrics(list(log.names), f_c, f_nc, gap, worst, valid)


def rho(n_pos, n_neg):
    """Under-representation min(N(c), N(not c)) / (N(c) + N(not c))."""
    total = n_pos + n_neg
    if total <= 0:
        raise MetricError("rho needs at least one sample")
    return min(n_pos, n_neg) / total


@dataclass
class FairnessReport:
    names: list
    pairs: PairMetrics
    gap_by_c: np.ndarray
    worst_by_c: np.ndarray
    valid_by_c: np.ndarray
    rho_by_c: np.ndarray
    median_gap: float
    median_worst: float
    mean_gap: float
    invalid_cells: int

    def to_dict(self):
        def clean(arr):
            return [None if np.isnan(v) else float(v) for v in np.asarray(arr, dtype=float)]

        cells = [{"t": self.names[t], "c": self.names[c],
                  "f1_given_c": clean([self.pairs.f1_given_c[t, c]])[0],
                  "f1_given_not_c": clean([self.pairs.f1_given_not_c[t, c]])[0],
                  "gap": clean([self.pairs.gap[t, c]])[0],
                  "worst": clean([self.pairs.worst[t, c]])[0],
                  "valid": bool(self.pairs.valid[t, c])}
                 for t, c in self.pairs.cells()]
        return {
            "attributes": list(self.names),
            "rho": clean(self.rho_by_c),
            "gap_by_c": clean(self.gap_by_c),
            "worst_by_c": clean(self.worst_by_c),
            "valid_cells_by_c": [int(v) for v in self.valid_by_c],
            "median_gap": clean([self.median_gap])[0],
            "median_worst": clean([self.median_worst])[0],
            "mean_gap": clean([self.mean_gap])[0],
            "num_cells": self.pairs.num_cells,
            "invalid_cells": self.invalid_cells,
            "cells": cells,
        }

    def worst_values(self):
        """F1-worst of every valid cell, in (t, c) row-major order."""
        return np.array([self.pairs.worst[t, c] for t, c in self.pairs.cells()
                         if self.pairs.valid[t, c]])


def aggregate_report(pairs, labels):
    labels = np.asarray(labels)
    k = len(pairs.names)
    gap_by_c, worst_by_c = np.full(k, np.nan), np.full(k, np.nan)
    n_valid = pairs.valid.sum(axis=0)
    for c in range(k):
        col = pairs.valid[:, c]
        if col.any():
            gap_by_c[c] = pairs.gap[col, c].mean()
            worst_by_c[c] = pairs.worst[col, c].mean()
    n_pos = labels.sum(axis=0)
    rhos = np.array([rho(int(p), int(labels.shape[0] - p)) for p in n_pos])
    usable = n_valid > 0
    med_gap = float(np.median(gap_by_c[usable])) if usable.any() else float("nan")
    med_worst = float(np.median(worst_by_c[usable])) if usable.any() else float("nan")
    mean_gap = float(pairs.gap[pairs.valid].mean()) if pairs.valid.any() else float("nan")
    return FairnessReport(list(pairs.names), pairs, gap_by_c, worst_by_c, n_valid, rhos,
                          med_gap, med_worst, mean_gap, int(pairs.num_cells - pairs.valid.sum()))


def evaluate_fairness(train_log, test_log):
    """Calibrate on train scores, then gap/worst report on the test split."""
    thresholds = calibrate_thresholds(train_log)
    report = aggregate_report(pairwise_metrics(test_log, thresholds), test_log.labels)
    return report, thresholds


# ---------------------------------------------------------------------------
# prediction log file
#
#   bytes 0-7   magic b"BNFPRED\0"
#   bytes 8-11  uint32 LE version (1), bytes 12-15 reserved
#   JSON line   {"names": [...], "num_attributes": K, "num_samples": N}\n
#   N*K float64 LE scores, then N*K uint8 labels, both row-major

PRED_MAGIC = b"BNFPRED\0"


def prediction_log_bytes(log):
    n, k = log.scores.shape
    header = json.dumps({"names": list(log.names), "num_attributes": k, "num_samples": n},
                        sort_keys=True) + "\n"
    return (PRED_MAGIC + struct.pack("<II", 1, 0) + header.encode()
            + np.ascontiguousarray(log.scores, dtype="<f8").tobytes()
            + np.ascontiguousarray(log.labels, dtype=np.uint8).tobytes())


def write_prediction_log(path, log):
    with open(path, "wb") as fh:
        fh.write(prediction_log_bytes(log))


def read_prediction_log(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != PRED_MAGIC:
        raise MetricError(f"{path}: not a prediction log")
    nl = blob.index(b"\n", 16)
    meta = json.loads(blob[16:nl])
    n, k = meta["num_samples"], meta["num_attributes"]
    off = nl + 1
    scores = np.frombuffer(blob, dtype="<f8", count=n * k, offset=off).reshape(n, k)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n * k, offset=off + 8 * n * k).reshape(n, k)
    return PredictionLog(scores.astype(np.float64), labels.astype(np.int8), meta["names"])
