"""Split conformal prediction and conformal risk control for class probabilities.

Prediction sets are handled in two forms: :class:`PredictionSet` for single
items and boolean membership masks of shape ``(n, K)`` for batches.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class PredictionSet:
    labels: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.labels)

    def __contains__(self, y) -> bool:
        return y in self.labels

    @classmethod
    def from_mask(cls, row) -> "PredictionSet":
        return cls(tuple(int(k) for k in np.flatnonzero(row)))

    def __str__(self) -> str:
        return "|".join(map(str, self.labels))


def _probs(probs) -> np.ndarray:
    P = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if P.ndim != 2 or P.shape[1] < 1:
        raise ValueError("probabilities must be (n, K)")
    if np.any(P < -1e-12) or np.any(np.abs(P.sum(1) - 1.0) > 1e-6):
        raise ValueError("each probability row must lie on the simplex")
    return P


def nonconformity(probs, y: int) -> float:
    """``1 - p_y``."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if not 0 <= y < len(p):
        raise ValueError(f"label {y} out of range for {len(p)} classes")
    return float(1.0 - p[y])


def nonconformity_scores(probs, labels) -> np.ndarray:
    P = _probs(probs)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (P.shape[0],):
        raise ValueError("need one label per row")
    if y.min(initial=0) < 0 or y.max(initial=0) >= P.shape[1]:
        raise ValueError("labels out of range")
    return 1.0 - P[np.arange(len(y)), y]


def quantile_rank(n: int, alpha: float) -> int:
    """``ceil((n + 1)(1 - alpha))`` with float fuzz removed."""
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-9)


@dataclass(frozen=True)
class ConformalCalibrator:
    alpha: float
    scores: np.ndarray  # ascending
    q_hat: float

    @property
    def n(self) -> int:
        return len(self.scores)


def calibrate_scores(scores, alpha: float) -> ConformalCalibrator:
    """Threshold at the ``ceil((R+1)(1-alpha))``-th smallest score.

    When that rank exceeds ``R`` the threshold is 1.0, which admits every label.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("empty calibration set")
    k = quantile_rank(len(s), alpha)
    q_hat = 1.0 if k > len(s) else float(s[max(k, 1) - 1])
    s.flags.writeable = False
    return ConformalCalibrator(alpha, s, q_hat)


def calibrate(probs, labels, alpha: float) -> ConformalCalibrator:
    return calibrate_scores(nonconformity_scores(probs, labels), alpha)


def set_mask(probs, q_hat: float) -> np.ndarray:
    """Membership mask ``1 - p_k <= q_hat``."""
    P = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return 1.0 - P <= q_hat


def predict_set(probs, calibrator: ConformalCalibrator | float) -> PredictionSet:
    q = calibrator.q_hat if isinstance(calibrator, ConformalCalibrator) else float(calibrator)
    return PredictionSet.from_mask(set_mask(probs, q)[0])


def predict_sets(probs, calibrator: ConformalCalibrator | float) -> list[PredictionSet]:
    q = calibrator.q_hat if isinstance(calibrator, ConformalCalibrator) else float(calibrator)
    return [PredictionSet.from_mask(r) for r in set_mask(probs, q)]


def _as_mask(sets) -> np.ndarray | None:
    if isinstance(sets, np.ndarray) and sets.dtype == bool:
        return np.atleast_2d(sets)
    return None


def covered(sets, labels) -> np.ndarray:
    """Per-item indicator that the true label is in its set (invalid labels never are)."""
    y = np.asarray(labels, dtype=np.int64)
    mask = _as_mask(sets)
    if mask is not None:
        if len(mask) != len(y):
            raise ValueError("sets and labels differ in length")
        ok = (y >= 0) & (y < mask.shape[1])
        out = np.zeros(len(y), dtype=bool)
        out[ok] = mask[np.flatnonzero(ok), y[ok]]
        return out
    sets = list(sets)
    if len(sets) != len(y):
        raise ValueError("sets and labels differ in length")
    return np.array([int(t) in s for s, t in zip(sets, y)], dtype=bool)


def empirical_coverage(sets, labels) -> float:
    if len(labels) == 0:
        raise ValueError("empty input")
    return float(covered(sets, labels).mean())


def set_sizes(sets) -> np.ndarray:
    mask = _as_mask(sets)
    if mask is not None:
        return mask.sum(1)
    return np.array([s.size for s in sets])


def average_set_size(sets) -> float:
    sizes = set_sizes(sets)
    if sizes.size == 0:
        raise ValueError("empty input")
    return float(sizes.mean())


# ---------------------------------------------------------------------------
# conformal risk control

LossFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def miscoverage_loss(mask: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return 1.0 - covered(mask, labels)


def crc_mask(probs, rho: float) -> np.ndarray:
    """Membership mask ``p_k >= 1 - rho``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    return np.atleast_2d(np.asarray(probs, dtype=np.float64)) >= 1.0 - rho


def crc_set(probs, rho: float) -> PredictionSet:
    return PredictionSet.from_mask(crc_mask(probs, rho)[0])


@dataclass(frozen=True)
class CrcController:
    rho_hat: float
    alpha: float
    search_tol: float
    risk: float

    def mask(self, probs) -> np.ndarray:
        return crc_mask(probs, self.rho_hat)


class RiskUnattainable(ValueError):
    pass


def crc_fit(probs, labels, alpha: float, tol: float = 1e-4, loss: LossFn = miscoverage_loss) -> CrcController:
    """Smallest ``rho`` on the grid ``{0, tol, 2 tol, ..., 1}`` whose calibration risk is <= alpha.

    ``loss(mask, labels)`` returns per-item losses in [0, 1] and must be
    non-increasing as sets grow. Labels outside ``0..K-1`` (OOD items) are
    never covered.
    """
    P = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if P.shape[0] == 0:
        raise ValueError("empty calibration stream")
    if not 0.0 < tol <= 1.0:
        raise ValueError("tol must lie in (0, 1]")
    steps = round(1.0 / tol)

    def risk(j: int) -> float:
        return float(np.mean(loss(crc_mask(P, j / steps), y)))

    if alpha >= 1.0:
        return CrcController(0.0, alpha, tol, risk(0))
    top = risk(steps)
    if top > alpha:
        raise RiskUnattainable(f"risk {top:.4f} exceeds alpha={alpha} even with rho=1")
    lo, hi = 0, steps  # invariant: hi feasible
    if risk(0) <= alpha:
        hi = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if risk(mid) <= alpha:
            hi = mid
        else:
            lo = mid
    return CrcController(hi / steps, alpha, tol, risk(hi))


# ---------------------------------------------------------------------------
# files


def write_calibration_csv(path, probs, labels, item_ids: Sequence | None = None) -> None:
    P = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    ids = item_ids if item_ids is not None else [str(i) for i in range(len(P))]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["item_id"] + [f"prob_{k}" for k in range(P.shape[1])] + ["label"])
        for i, row, y in zip(ids, P, labels):
            w.writerow([i] + [repr(float(p)) for p in row] + [int(y)])


def read_calibration_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    k = len(header) - 2
    expected = ["item_id"] + [f"prob_{j}" for j in range(k)] + ["label"]
    if k < 1 or header != expected:
        raise ValueError(f"{path}: header must be {','.join(expected)}")
    ids = [r[0] for r in rows[1:]]
    P = np.array([[float(v) for v in r[1:-1]] for r in rows[1:]], dtype=np.float64).reshape(-1, k)
    y = np.array([int(r[-1]) for r in rows[1:]], dtype=np.int64)
    return ids, P, y


def coverage_table(
    cal_probs, cal_labels, test_probs, test_labels, alphas: Iterable[float]
) -> list[dict]:
    """Per-alpha ``{alpha, q_hat, coverage, avg_set_size, empty_sets}`` rows."""
    rows = []
    for a in alphas:
        cal = calibrate(cal_probs, cal_labels, a)
        m = set_mask(test_probs, cal.q_hat)
        rows.append(
            {
                "alpha": a,
                "q_hat": cal.q_hat,
                "coverage": empirical_coverage(m, test_labels),
                "avg_set_size": average_set_size(m),
                "empty_sets": int((m.sum(1) == 0).sum()),
            }
        )
    return rows
