"""Exact (O(N^2)) t-SNE for feature embeddings of a few hundred lesions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .rng import Rng

ENTROPY_TOL = 1e-5
MAX_BISECTIONS = 50
EXAGGERATION = 4.0
EXAGGERATION_ITERS = 100
MOMENTUM_SWITCH = 250


@dataclass
class Embedding2D:
    coords: np.ndarray
    kl: float
    initial_kl: float
    perplexity: float
    iterations: int
    seed: int


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(1)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(d: np.ndarray, beta: float):
    """Entropy (nats) and normalised affinities of one row at precision ``beta``."""
    shifted = d - d.min()
    p = np.exp(-shifted * beta)
    s = p.sum()
    p /= s
    h = math.log(s) + beta * float(np.dot(p, d - d.min()))
    return h, p


def conditional_affinities(D: np.ndarray, perplexity: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic ``P_{j|i}`` by bisection on the Gaussian precision; also the
    per-row perplexities actually reached."""
    n = D.shape[0]
    target = math.log(perplexity)
    P = np.zeros((n, n))
    reached = np.empty(n)
    for i in range(n):
        d = np.delete(D[i], i)
        beta = 1.0 / max(float(np.mean(d)), 1e-300)
        lo, hi = 0.0, math.inf
        h, p = _row_entropy(d, beta)
        for _ in range(MAX_BISECTIONS):
            diff = h - target
            if abs(diff) < ENTROPY_TOL:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == math.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            h, p = _row_entropy(d, beta)
        P[i, np.arange(n) != i] = p
        reached[i] = math.exp(h)
    return P, reached


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne(
    features,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
) -> Embedding2D:
    """Embed ``N x d`` features in 2-D by gradient descent on KL(P || Q)."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InputError("features must be an N x d matrix")
    n = X.shape[0]
    if n < 3 * perplexity:
        raise InputError(f"need N >= 3 * perplexity ({3 * perplexity:g}), got N = {n}")
    if not np.all(np.isfinite(X)):
        raise InputError("features contain non-finite values")
    if np.all(X == X[0]):
        raise InputError("degenerate input: all feature vectors are identical")
    D = squared_distances(X)
    cond, _ = conditional_affinities(D, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    Y = 1e-4 * Rng(seed).spawn("tsne").normal((n, 2))
    initial_kl = kl_divergence(P, Y)
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iterations):
        Pe = P * EXAGGERATION if it < EXAGGERATION_ITERS else P
        momentum = 0.5 if it < MOMENTUM_SWITCH else 0.8
        num = 1.0 / (1.0 + squared_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (Pe - Q) * num
        grad = 4.0 * (W.sum(1)[:, None] * Y - W @ Y)
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y -= Y.mean(axis=0)
    return Embedding2D(Y, kl_divergence(P, Y), initial_kl, float(perplexity), int(iterations), int(seed))


def knn_purity(coords: np.ndarray, labels, k: int = 5) -> float:
    """Mean fraction of each point's ``k`` nearest neighbours sharing its label."""
    labels = np.asarray(labels)
    D = squared_distances(np.asarray(coords, dtype=np.float64))
    np.fill_diagonal(D, np.inf)
    nn = np.argsort(D, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nn] == labels[:, None]))
