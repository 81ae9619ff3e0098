"""Patient-level OOD scores, gating, and distribution-shift control."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from truecam.numerics import roc_pr_curve


def ood_score_probability(tile_probs) -> float:
    """``1 - mean_i max_k p_ik`` (correctly rounded sum, so tile order never matters)."""
    P = np.atleast_2d(np.asarray(tile_probs, dtype=np.float64))
    if P.shape[0] == 0 or P.size == 0:
        raise ValueError("no tiles")
    return 1.0 - math.fsum(P.max(1).tolist()) / P.shape[0]


def ood_score_uncertainty(tile_uncertainty, delta: int = 200) -> float:
    """Mean of the ``min(delta, N)`` smallest tile uncertainties."""
    u = np.asarray(tile_uncertainty, dtype=np.float64).ravel()
    if u.size == 0:
        raise ValueError("no tiles")
    if delta < 1:
        raise ValueError("delta must be >= 1")
    m = min(delta, u.size)
    return math.fsum(np.sort(u)[:m].tolist()) / m


class ThresholdUnattainable(ValueError):
    pass


@dataclass(frozen=True)
class OodGate:
    score_kind: str = "uncertainty"  # "probability" | "uncertainty"
    delta: int = 200
    threshold: float = float("inf")
    threshold_policy: str = "fixed"  # "fixed" | "target-tpr" | "target-fpr"
    target: float | None = None

    def __post_init__(self):
        if self.score_kind not in ("probability", "uncertainty"):
            raise ValueError(f"unknown score kind {self.score_kind!r}")
        if self.threshold_policy not in ("fixed", "target-tpr", "target-fpr"):
            raise ValueError(f"unknown threshold policy {self.threshold_policy!r}")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if np.isnan(self.threshold):
            raise ValueError("threshold must not be NaN")

    def is_ood(self, scores) -> np.ndarray:
        return np.asarray(scores, dtype=np.float64) > self.threshold


def tuned_threshold(scores, is_ood, policy: str, target: float) -> float:
    """Threshold for ``ood iff score > t`` from a labelled tuning stream.

    ``target-tpr`` picks the highest threshold whose OOD recall reaches
    ``target``; ``target-fpr`` picks the lowest threshold whose In-D false
    positive rate stays at or below ``target``. Both land on the next lower
    distinct tuning score of the ROC sweep (or ``-inf`` past the end).
    """
    if not 0.0 <= target <= 1.0:
        raise ThresholdUnattainable(f"target {target} outside [0, 1]")
    try:
        curve = roc_pr_curve(scores, np.asarray(is_ood, dtype=np.int64))
    except ValueError as e:
        raise ThresholdUnattainable(f"tuning stream needs both In-D and OOD items: {e}") from e
    if policy == "target-tpr":
        i = int(np.argmax(curve.tpr >= target - 1e-12))
    elif policy == "target-fpr":
        i = int(np.flatnonzero(curve.fpr <= target + 1e-12)[-1])
    else:
        raise ValueError(f"policy {policy!r} does not tune a threshold")
    if i + 1 < len(curve.thresholds):
        return float(curve.thresholds[i + 1])
    return float("-inf")


def tune_gate(scores, is_ood, policy: str, target: float, score_kind: str = "uncertainty", delta: int = 200) -> OodGate:
    t = tuned_threshold(scores, is_ood, policy, target)
    return OodGate(score_kind, delta, t, policy, target)


def gate(score: float, g: OodGate) -> str:
    return "ood" if score > g.threshold else "in-domain"


@dataclass(frozen=True)
class DscReport:
    n_total: int
    n_excluded: int
    threshold: float
    excluded: tuple[str, ...]

    def as_dict(self) -> dict:
        return {"n_total": self.n_total, "n_excluded": self.n_excluded, "threshold": self.threshold,
                "excluded": list(self.excluded)}


def dsc_filter(patient_ids, scores, g: OodGate) -> tuple[list[str], DscReport]:
    """Drop every patient of an external cohort the gate flags as OOD."""
    ids = list(patient_ids)
    if not ids:
        raise ValueError("empty cohort")
    flags = g.is_ood(scores)
    if len(flags) != len(ids):
        raise ValueError("one score per patient required")
    kept = [p for p, f in zip(ids, flags) if not f]
    dropped = tuple(p for p, f in zip(ids, flags) if f)
    return kept, DscReport(len(ids), len(dropped), g.threshold, dropped)
