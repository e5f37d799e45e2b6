"""Imbalance-aware binary metrics. Malignant (label 1) is the positive class."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InputError


class UndefinedMetricWarning(UserWarning):
    """A rate was undefined (e.g. no positives) and reported as NaN."""


def as_binary(labels) -> np.ndarray:
    """0/1 array from ints, bools or ``benign``/``malignant`` strings."""
    arr = np.asarray(labels)
    if arr.dtype.kind in "USO":
        mapping = {"benign": 0, "malignant": 1, "0": 0, "1": 1}
        try:
            return np.array([mapping[str(v)] for v in arr.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"labels must be binary, got {exc.args[0]!r}") from exc
    out = arr.astype(np.int64)
    if not np.all((out == 0) | (out == 1)) or not np.array_equal(out, arr):
        raise InputError("labels must be binary 0/1")
    return out


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: float
    specificity: float
    g_mean: float
    accuracy: float
    auc: float = math.nan
    fold: int | None = None
    fingerprint: str | None = None
    flags: list[str] = field(default_factory=list)

    def triple(self, digits: int = 2) -> tuple[float, float, float]:
        """(sensitivity, specificity, G-mean) rounded for display."""
        return tuple(round(v, digits) for v in (self.sensitivity, self.specificity, self.g_mean))

    def to_json(self) -> dict:
        return asdict(self)


def confusion_metrics(decisions, labels, scores=None, fold: int | None = None) -> MetricsReport:
    """Confusion counts and derived rates; optional scores add the AUC."""
    d = as_binary(decisions)
    y = as_binary(labels)
    if d.shape != y.shape:
        raise InputError(f"{d.size} decisions for {y.size} labels")
    tp = int(np.sum((d == 1) & (y == 1)))
    fn = int(np.sum((d == 0) & (y == 1)))
    tn = int(np.sum((d == 0) & (y == 0)))
    fp = int(np.sum((d == 1) & (y == 0)))
    flags = []
    if tp + fn:
        sens = tp / (tp + fn)
    else:
        sens = math.nan
        flags.append("no_positive_labels")
    if tn + fp:
        spec = tn / (tn + fp)
    else:
        spec = math.nan
        flags.append("no_negative_labels")
    if flags:
        warnings.warn(", ".join(flags), UndefinedMetricWarning, stacklevel=2)
    g_mean = math.sqrt(sens * spec) if not (math.isnan(sens) or math.isnan(spec)) else math.nan
    acc = (tp + tn) / y.size if y.size else math.nan
    auc = math.nan
    if scores is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            auc = roc_auc(scores, y)
        if math.isnan(auc):
            flags.append("auc_undefined")
    return MetricsReport(tp, fp, tn, fn, sens, spec, g_mean, acc, auc, fold, None, flags)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for tied scores; NaN if one class is absent."""
    s = np.asarray(scores, dtype=np.float64)
    y = as_binary(labels)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined for single-class labels", UndefinedMetricWarning, stacklevel=2)
        return math.nan
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_report(reports: list[MetricsReport]) -> dict:
    """Average-of-folds row: each metric is the mean of the per-fold values (NaNs skipped)."""
    keys = ("sensitivity", "specificity", "g_mean", "accuracy", "auc")
    row = {}
    for k in keys:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        row[k] = float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else math.nan
    return row
