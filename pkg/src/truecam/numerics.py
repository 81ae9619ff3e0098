"""Seeded numerical kernels shared across the trust stack.

Random streams come from numpy's ``PCG64`` bit generator (PCG-XSL-RR 128/64),
which produces the same stream for the same seed on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

RNG_ALGORITHM = "PCG64"

Rng = np.random.Generator


def make_rng(seed: int | Sequence[int]) -> Rng:
    """Return a PCG64-backed generator for ``seed`` (an int or a sequence of ints)."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(W, name: str = "matrix") -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {W.shape}")
    if W.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(W)):
        raise ValueError(f"{name} has non-finite entries")
    return W


# ---------------------------------------------------------------------------
# spectral norm


def power_iteration(
    W: np.ndarray, iterations: int, rng: Rng | None = None, v0: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Estimate the top singular value of ``W`` and its right singular vector.

    Runs exactly ``iterations`` steps of ``v <- W^T W v / ||W^T W v||`` from
    ``v0`` (or a seeded random unit vector) and returns the Rayleigh
    estimate ``||W v||`` together with the final ``v``.
    """
    W = as_matrix(W, "W")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if v0 is None:
        if rng is None:
            raise ValueError("either rng or v0 is required")
        v = rng.standard_normal(W.shape[1])
    else:
        v = np.array(v0, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v = np.ones(W.shape[1])
        nv = np.linalg.norm(v)
    v = v / nv
    for _ in range(iterations):
        u = W @ v
        w = W.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # W v = 0: either W is zero or v hit the null space
            return float(np.linalg.norm(u)), v
        v = w / nw
    return float(np.linalg.norm(W @ v)), v


def spectral_norm(W, iterations: int, rng: Rng) -> float:
    """Largest singular value of ``W`` by power iteration (no early exit)."""
    sigma, _ = power_iteration(W, iterations, rng=rng)
    return sigma


# ---------------------------------------------------------------------------
# k-means and silhouette


class KMeansRun(NamedTuple):
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = _sq_dists(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = X[idx]
        d2 = np.minimum(d2, _sq_dists(X, centers[j : j + 1])[:, 0])
    return centers


def kmeans_single_run(X, k: int, max_iters: int, rng: Rng) -> KMeansRun:
    """One Lloyd run from k-means++ seeding; ``history`` holds inertia per iteration."""
    X = as_matrix(X, "X")
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    centers = _kmeans_pp(X, k, rng)
    history: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    for it in range(max(1, max_iters)):
        d2 = _sq_dists(X, centers)
        new_assign = d2.argmin(1)
        # the assignment step can only lower inertia w.r.t. the current centers
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if it > 0 and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = X[members].mean(0)
            else:
                # empty cluster: move it onto the point worst served by its center
                far = int(d2[np.arange(n), assign].argmax())
                centers[j] = X[far]
                assign[far] = j
    d2 = _sq_dists(X, centers)
    assign = d2.argmin(1)
    inertia = float(((X - centers[assign]) ** 2).sum())
    history.append(inertia)
    return KMeansRun(centers, assign, inertia, history)


def kmeans(
    X, k: int, max_iters: int = 100, restarts: int = 8, rng: Rng | None = None
) -> tuple[np.ndarray, np.ndarray, float]:
    """k-means with k-means++ seeding; best of ``restarts`` runs by inertia."""
    if rng is None:
        rng = make_rng(0)
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best = None
    for _ in range(restarts):
        run = kmeans_single_run(X, k, max_iters, rng)
        if best is None or run.inertia < best.inertia:
            best = run
    return best.centers, best.assignments, best.inertia


def silhouette(X, assignments) -> float:
    """Mean silhouette coefficient.

    Points in singleton clusters score 0, as do points with a(i) = b(i) = 0.
    """
    X = as_matrix(X, "X")
    labels = np.asarray(assignments)
    if labels.shape != (X.shape[0],):
        raise ValueError("assignments must have one entry per row")
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    D = np.sqrt(_sq_dists(X, X))
    np.fill_diagonal(D, 0.0)
    counts = np.bincount(inv)
    # sums[i, c] = total distance from i to members of cluster c
    onehot = np.zeros((X.shape[0], len(uniq)))
    onehot[np.arange(X.shape[0]), inv] = 1.0
    sums = D @ onehot
    own = counts[inv]
    a = np.where(own > 1, sums[np.arange(len(inv)), inv] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts[None, :]
    means[np.arange(len(inv)), inv] = np.inf
    b = means.min(1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


# ---------------------------------------------------------------------------
# ROC / AUROC


@dataclass(frozen=True)
class RocCurve:
    """Operating points of a ``score >= threshold`` detector.

    ``thresholds`` run from ``+inf`` downward, so ``tpr`` and ``fpr`` are
    non-decreasing along them and the curve starts at (0, 0), ends at (1, 1).
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    precision: np.ndarray

    def auc(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    y = y.astype(np.int64)
    n1 = int(y.sum())
    if n1 == 0 or n1 == len(y):
        raise ValueError("both classes must be present")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; each tied positive/negative pair counts 1/2."""
    s, y = _check_binary(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    ranks = rankdata(s)  # average ranks give exactly 1/2 per tied pair
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def roc_pr_curve(scores, labels) -> RocCurve:
    """Sweep every distinct score as a threshold (positive iff score >= threshold)."""
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tp = np.r_[0, tp[last]].astype(np.float64)
    fp = np.r_[0, fp[last]].astype(np.float64)
    thresholds = np.r_[np.inf, s_sorted[last]]
    n1 = tp[-1]
    n0 = fp[-1]
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.ones_like(tp), where=predicted > 0)
    return RocCurve(thresholds, tp / n1, fp / n0, precision)
