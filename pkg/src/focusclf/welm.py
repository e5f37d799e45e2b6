"""Weighted kernel extreme learning machine on intermediate CNN features.

The closed-form kernel solution solves ``(I/C + W Omega) A = W T`` where
``Omega`` is the training kernel matrix, ``W = diag(w)`` holds per-sample
class weights (``1 / class count``) and ``T`` is the +-1 coded target
matrix; scores at a new point are ``k(x)^T A``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Patch, stack_patches
from .errors import ConfigError, FormatError, InputError, NumericError
from .io import read_container, write_container
from .metrics import MetricsReport, as_binary, confusion_metrics, mean_report
from .model import CONV_TAPS, FC_TAPS, Checkpoint, forward

TAPS = CONV_TAPS + FC_TAPS
TABLE_TAPS = ("C1", "C2", "C3", "C4", "FC1", "FC2", "C1+C4")
POOLINGS = ("channel-average", "flatten")


def parse_taps(taps) -> tuple[str, ...]:
    if isinstance(taps, str):
        taps = taps.split("+")
    taps = tuple(t.strip().upper() for t in taps)
    unknown = [t for t in taps if t not in TAPS]
    if unknown or not taps:
        raise InputError(f"unknown tap {unknown[0] if unknown else ''!r}; choose from {'+'.join(TAPS)}")
    return taps


# --------------------------------------------------------------------------
# feature extraction
# --------------------------------------------------------------------------


@dataclass
class FeatureVector:
    lesion_id: str
    taps: tuple[str, ...]
    pooling: str
    values: np.ndarray


def feature_matrix(checkpoint: Checkpoint, x: np.ndarray, taps, pooling: str = "channel-average", chunk: int = 128) -> np.ndarray:
    """Inference-mode tap features for a batch ``N x S x S x C``, concatenated in tap order."""
    taps = parse_taps(taps)
    if pooling not in POOLINGS:
        raise InputError(f"unknown pooling {pooling!r}")
    blocks = []
    for start in range(0, x.shape[0], chunk):
        _, acts, _ = forward(checkpoint.params, x[start : start + chunk], train=False)
        parts = []
        for t in taps:
            a = acts[t].astype(np.float64)
            if t in CONV_TAPS:
                a = a.mean(axis=(1, 2)) if pooling == "channel-average" else a.reshape(a.shape[0], -1)
            parts.append(a)
        blocks.append(np.concatenate(parts, axis=1))
    return np.concatenate(blocks, axis=0)


def extract_features(checkpoint: Checkpoint, patch: Patch, taps, pooling: str = "channel-average") -> FeatureVector:
    if tuple(patch.channels) != tuple(checkpoint.config.channels):
        raise InputError(f"patch channels {patch.channels} != model channels {checkpoint.config.channels}")
    values = feature_matrix(checkpoint, patch.data[None].astype(np.float32), taps, pooling)[0]
    return FeatureVector(patch.record.lesion_id, parse_taps(taps), pooling, values)


def patch_features(checkpoint: Checkpoint, patches: Sequence[Patch], taps, pooling: str = "channel-average"):
    """``(lesion_ids, labels, X)`` for a list of patches."""
    for p in patches:
        if tuple(p.channels) != tuple(checkpoint.config.channels):
            raise InputError(f"patch channels {p.channels} != model channels {checkpoint.config.channels}")
    x, y = stack_patches(patches)
    return [p.record.lesion_id for p in patches], y, feature_matrix(checkpoint, x, taps, pooling)


def write_feature_csv(path, lesion_ids, labels, X) -> None:
    X = np.asarray(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lesion_id", "label"] + [f"f{i}" for i in range(X.shape[1])])
        for lid, lab, row in zip(lesion_ids, labels, X):
            w.writerow([lid, int(lab)] + [repr(float(v)) for v in row])


def read_feature_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0][:2] != ["lesion_id", "label"]:
        raise FormatError(f"{path}: header must start with lesion_id,label")
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = as_binary([r[1] for r in body])
    X = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 2)
    return ids, labels, X


# --------------------------------------------------------------------------
# kernels and the closed-form solver
# --------------------------------------------------------------------------


def rbf_kernel(u, v, gamma: float) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InputError(f"dimension mismatch: {u.shape} vs {v.shape}")
    if gamma <= 0:
        raise InputError("gamma must be positive")
    d = u - v
    return float(np.exp(-gamma * np.dot(d, d)))


def kernel_matrix(U: np.ndarray, V: np.ndarray, gamma: float, kind: str = "rbf") -> np.ndarray:
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if U.shape[1] != V.shape[1]:
        raise InputError(f"dimension mismatch: {U.shape[1]} vs {V.shape[1]}")
    if kind == "linear":
        return U @ V.T
    if kind != "rbf":
        raise ConfigError(f"unknown kernel {kind!r}")
    if gamma <= 0:
        raise InputError("gamma must be positive")
    sq = (U * U).sum(1)[:, None] + (V * V).sum(1)[None, :] - 2.0 * (U @ V.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


def class_weights(labels: np.ndarray) -> np.ndarray:
    """``w_i = 1 / (number of samples in the class of i)``."""
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    return 1.0 / counts[labels]


def signed_targets(labels: np.ndarray) -> np.ndarray:
    return np.where(np.eye(2, dtype=bool)[labels], 1.0, -1.0)


@dataclass
class KernelModel:
    X: np.ndarray
    T: np.ndarray
    weights: np.ndarray
    C: float
    gamma: float
    A: np.ndarray
    kernel: str = "rbf"
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.X.shape[1]:
            raise InputError(f"model expects {self.X.shape[1]} features, got {X.shape[1]}")
        if self.mean is not None:
            X = (X - self.mean) / self.scale
        return X

    def save(self, path) -> None:
        header = {"kind": "WELM", "C": self.C, "gamma": self.gamma, "kernel": self.kernel,
                  "standardized": self.mean is not None}
        tensors = {"X": self.X, "T": self.T, "weights": self.weights, "A": self.A}
        if self.mean is not None:
            tensors["mean"], tensors["scale"] = self.mean, self.scale
        write_container(path, header, tensors, self.info)

    @classmethod
    def load(cls, path) -> "KernelModel":
        header, t, info = read_container(path)
        if header.get("kind") != "WELM":
            raise FormatError(f"{path}: expected a WELM record, found {header.get('kind')!r}")
        f64 = {k: v.astype(np.float64) for k, v in t.items()}
        return cls(f64["X"], f64["T"], f64["weights"], header["C"], header["gamma"], f64["A"],
                   header["kernel"], f64.get("mean"), f64.get("scale"), info)


def welm_fit(
    X,
    labels,
    C: float,
    gamma: float,
    kernel: str = "rbf",
    weights=None,
    weighted: bool = True,
    standardize: bool = False,
) -> KernelModel:
    """Solve the weighted kernel ELM for coefficients ``A`` by a dense direct solve.

    ``weights`` overrides the default inverse-class-count weighting;
    ``weighted=False`` takes the plain kernel-ELM path ``(I/C + Omega) A = T``.
    With ``standardize`` the features are z-scored with statistics of ``X``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = as_binary(labels)
    n = X.shape[0]
    if n < 2 or y.shape != (n,):
        raise InputError(f"need >= 2 samples with one label each, got X {X.shape}, labels {y.shape}")
    if y.min() == y.max():
        raise InputError("both classes must be present")
    if C <= 0:
        raise ConfigError("C must be positive")
    mean = scale = None
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        X = (X - mean) / scale
    T = signed_targets(y)
    omega = kernel_matrix(X, X, gamma, kernel)
    if not weighted:
        w = np.ones(n)
        system = np.eye(n) / C + omega
        rhs = T
    else:
        w = class_weights(y) if weights is None else np.asarray(weights, dtype=np.float64)
        system = np.eye(n) / C + w[:, None] * omega
        rhs = w[:, None] * T
    cond = float(np.linalg.cond(system))
    if not math.isfinite(cond) or cond > 1.0 / np.finfo(np.float64).eps:
        raise NumericError(f"wELM system is singular to working precision (condition number {cond:.3e})")
    A = np.linalg.solve(system, rhs)
    return KernelModel(X, T, w, float(C), float(gamma), A, kernel, mean, scale, {"condition": cond})


def welm_scores(model: KernelModel, X) -> np.ndarray:
    """``N x 2`` scores ``k(x)^T A`` (columns: benign, malignant)."""
    Z = model.transform(X)
    return kernel_matrix(Z, model.X, model.gamma, model.kernel) @ model.A


def welm_decide(scores: np.ndarray) -> np.ndarray:
    """Argmax over the two score columns; exact ties go to benign."""
    scores = np.atleast_2d(scores)
    return (scores[:, 1] > scores[:, 0]).astype(np.int64)


def welm_predict(model: KernelModel, x) -> tuple[np.ndarray, int]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("welm_predict takes one feature vector; use welm_scores for batches")
    s = welm_scores(model, x[None])[0]
    return s, int(welm_decide(s)[0])


# --------------------------------------------------------------------------
# hyper-parameter search
# --------------------------------------------------------------------------


@dataclass
class HyperGrid:
    C: tuple[float, ...] = tuple(2.0**e for e in range(-6, 13, 2))
    gamma: tuple[float, ...] = tuple(2.0**e for e in range(-10, 5, 2))

    def __post_init__(self):
        self.C = tuple(float(c) for c in self.C)
        self.gamma = tuple(float(g) for g in self.gamma)
        if not self.C or not self.gamma:
            raise ConfigError("hyper-parameter grid is empty")
        if min(self.C) <= 0 or min(self.gamma) <= 0:
            raise ConfigError("grid values must be positive")

    def cells(self):
        return itertools.product(self.C, self.gamma)


@dataclass
class FoldFeatures:
    fold: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    val_ids: list[str] = field(default_factory=list)


@dataclass
class FoldSearch:
    fold: int
    C: float
    gamma: float
    metrics: MetricsReport
    val_scores: np.ndarray


def search_fold(ff: FoldFeatures, grid: HyperGrid, standardize: bool = True) -> FoldSearch:
    """Pick (C, gamma) with the highest validation G-mean; first grid cell wins ties."""
    best = None
    for C, gamma in grid.cells():
        try:
            model = welm_fit(ff.X_train, ff.y_train, C, gamma, standardize=standardize)
        except NumericError:
            continue
        s = welm_scores(model, ff.X_val)
        rep = confusion_metrics(welm_decide(s), ff.y_val, s[:, 1], fold=ff.fold)
        key = -1.0 if math.isnan(rep.g_mean) else rep.g_mean
        if best is None or key > best[0]:
            best = (key, FoldSearch(ff.fold, C, gamma, rep, s[:, 1]))
    if best is None:
        raise NumericError(f"fold {ff.fold}: every grid cell produced a singular system")
    return best[1]


def welm_grid_search(folds: Sequence[FoldFeatures], grid: HyperGrid, standardize: bool = True) -> dict:
    """Per-fold tuning on the CNN's fold split; returns per-fold rows and the fold average."""
    results = [search_fold(ff, grid, standardize) for ff in folds]
    rows = [
        {"fold": r.fold + 1, "C": r.C, "gamma": r.gamma, "sensitivity": r.metrics.sensitivity,
         "specificity": r.metrics.specificity, "g_mean": r.metrics.g_mean, "auc": r.metrics.auc,
         "accuracy": r.metrics.accuracy}
        for r in results
    ]
    return {"rows": rows, "average": mean_report([r.metrics for r in results]), "results": results}
