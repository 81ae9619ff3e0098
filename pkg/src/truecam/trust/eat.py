"""Ambiguity scoring and elimination of ambiguous tiles (EAT)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from truecam.numerics import Rng, as_matrix, kmeans, make_rng


def ambiguity_score(tile_probs) -> np.ndarray | float:
    """``1 - |p0 - p1|`` for binary probability pairs (a pair or an (n, 2) array)."""
    P = np.asarray(tile_probs, dtype=np.float64)
    if P.shape[-1] != 2:
        raise ValueError("ambiguity score is defined for two classes only")
    s = 1.0 - np.abs(P[..., 0] - P[..., 1])
    return float(s) if s.ndim == 0 else s


@dataclass(frozen=True)
class AmbiguityModel:
    """A binary tile classifier used only to score ambiguity."""

    kind: str  # "sngp-head" | "logistic-proxy"
    predict_proba: Callable[[np.ndarray], np.ndarray]

    def score(self, X) -> np.ndarray:
        return ambiguity_score(self.predict_proba(np.atleast_2d(X)))


def fit_logistic_proxy(X, y, l2: float = 1.0) -> AmbiguityModel:
    """L2-regularized logistic regression on tile embeddings (bias unpenalized)."""
    X = as_matrix(X, "X")
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("proxy labels must be 0/1")
    mean = X.mean(0)
    scale = X.std(0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    n, d = Z.shape

    def objective(w):
        z = Z @ w[:d] + w[d]
        # log(1 + exp(z)) - y z, computed stably
        loss = np.logaddexp(0.0, z) - y * z
        r = expit(z) - y
        grad = np.r_[Z.T @ r, r.sum()] / n
        grad[:d] += l2 * w[:d] / n
        return loss.mean() + 0.5 * l2 * (w[:d] @ w[:d]) / n, grad

    res = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B")
    w = res.x

    def predict_proba(Xn):
        p1 = expit(((np.atleast_2d(Xn) - mean) / scale) @ w[:d] + w[d])
        return np.column_stack([1.0 - p1, p1])

    return AmbiguityModel("logistic-proxy", predict_proba)


def head_ambiguity_model(head) -> AmbiguityModel:
    from truecam.sngp_head import predict

    return AmbiguityModel("sngp-head", lambda X: predict(X, head).probs)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EatFilter:
    mode: str  # "cluster" | "threshold"
    centers: np.ndarray | None = None
    ambiguous_cluster_id: int | None = None
    threshold: float | None = None
    target_elimination_rate: float = 0.0
    dominance: tuple[float, ...] = ()
    training_elimination_rate: float = 0.0

    def __post_init__(self):
        if self.mode == "cluster":
            if self.centers is None or self.ambiguous_cluster_id is None:
                raise ValueError("cluster mode needs fitted centers")
        elif self.mode == "threshold":
            if self.threshold is None:
                raise ValueError("threshold mode needs a threshold")
        else:
            raise ValueError(f"unknown EAT mode {self.mode!r}")
        if not 0.0 <= self.target_elimination_rate < 1.0:
            raise ValueError("elimination rate must lie in [0, 1)")


class NoAmbiguousCluster(ValueError):
    pass


def fit_eat_cluster(
    features,
    tile_probs,
    tile_labels,
    k: int = 3,
    rng: Rng | None = None,
    dominance_cutoff: float = 0.6,
    restarts: int = 8,
) -> EatFilter:
    """Cluster tiles and pick the cluster least dominated by either slide label.

    Dominance of a cluster is ``max(frac label 0, frac label 1)`` over its
    tiles; ties go to the cluster with the higher mean ambiguity. A minimum
    dominance at or above ``dominance_cutoff`` means no cluster qualifies.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    X = as_matrix(features, "features")
    labels = np.asarray(tile_labels)
    amb = ambiguity_score(tile_probs)
    if rng is None:
        rng = make_rng(0)
    centers, assign, _ = kmeans(X, k, restarts=restarts, rng=rng)
    counts = np.bincount(assign, minlength=k)
    if (counts == 0).any():
        raise ValueError("k-means produced an empty cluster")
    dominance = np.array([max((labels[assign == j] == 0).mean(), (labels[assign == j] == 1).mean()) for j in range(k)])
    mean_amb = np.array([amb[assign == j].mean() for j in range(k)])
    order = np.lexsort((-mean_amb, dominance))
    best = int(order[0])
    if dominance[best] >= dominance_cutoff:
        raise NoAmbiguousCluster(
            f"every cluster is dominated by one label (min dominance {dominance[best]:.3f} >= {dominance_cutoff})"
        )
    rate = float(counts[best] / len(assign))
    return EatFilter(
        "cluster", centers=centers, ambiguous_cluster_id=best, dominance=tuple(dominance.tolist()),
        target_elimination_rate=rate, training_elimination_rate=rate,
    )


def fit_eat_threshold(train_ambiguity, target_rate: float) -> EatFilter:
    """Threshold so that ``round(target_rate * n)`` training tiles score above it."""
    a = np.sort(np.asarray(train_ambiguity, dtype=np.float64))[::-1]
    if a.size == 0:
        raise ValueError("no training tiles")
    if not 0.0 <= target_rate < 1.0:
        raise ValueError("target_rate must lie in [0, 1)")
    n_drop = int(round(target_rate * len(a)))
    threshold = 1.0 if n_drop == 0 else float(a[n_drop])
    achieved = float((a > threshold).mean())
    return EatFilter("threshold", threshold=threshold, target_elimination_rate=target_rate,
                     training_elimination_rate=achieved)


def nearest_center(features, centers) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    d = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
    return d.argmin(1)


def eliminate_tiles(filt: EatFilter, features=None, ambiguity=None) -> np.ndarray:
    """Indices of one slide's retained tiles.

    If every tile would go, the least ambiguous one stays (in cluster mode
    without scores: the tile farthest from the ambiguous center).
    """
    if filt.mode == "cluster":
        if features is None:
            raise ValueError("cluster mode needs tile features")
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        n = X.shape[0]
        drop = nearest_center(X, filt.centers) == filt.ambiguous_cluster_id
    else:
        if ambiguity is None:
            raise ValueError("threshold mode needs ambiguity scores")
        n = len(ambiguity)
        drop = np.asarray(ambiguity) > filt.threshold
    if n == 0:
        raise ValueError("empty slide")
    keep = np.flatnonzero(~drop)
    if keep.size:
        return keep
    if ambiguity is not None:
        return np.array([int(np.argmin(ambiguity))])
    d = ((X - filt.centers[filt.ambiguous_cluster_id]) ** 2).sum(1)
    return np.array([int(np.argmax(d))])


def eat_keep_mask(filt: EatFilter, slide_ids, features=None, ambiguity=None) -> np.ndarray:
    """Boolean keep mask over a whole cohort, applying :func:`eliminate_tiles` per slide."""
    slide_ids = np.asarray(slide_ids)
    keep = np.zeros(len(slide_ids), dtype=bool)
    _, inv = np.unique(slide_ids, return_inverse=True)
    for g in range(inv.max() + 1 if len(inv) else 0):
        rows = np.flatnonzero(inv == g)
        f = None if features is None else np.asarray(features)[rows]
        a = None if ambiguity is None else np.asarray(ambiguity)[rows]
        keep[rows[eliminate_tiles(filt, f, a)]] = True
    return keep
