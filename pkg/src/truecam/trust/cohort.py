"""Tile -> slide -> patient aggregation and patient-level trust metrics."""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass

import numpy as np

BREAKDOWN_CATEGORIES = ("single-correct", "single-incorrect", "abstention", "empty")
OTHERS = "Others"


def categorize(pred_set, label: int) -> str:
    """Breakdown category of one prediction set (any set with >= 2 labels abstains)."""
    labels = tuple(pred_set)
    if len(labels) == 0:
        return "empty"
    if len(labels) == 1:
        return "single-correct" if labels[0] == label else "single-incorrect"
    return "abstention"


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    slide_ids: tuple[str, ...]
    slide_probs: np.ndarray  # (n_slides, K), aligned with slide_ids
    probs: np.ndarray  # (K,)
    label: int
    sex: str = ""
    race_group: str = ""
    prediction_set: tuple[int, ...] | None = None
    score_ood: float | None = None

    @property
    def breakdown(self) -> str | None:
        if self.prediction_set is None:
            return None
        return categorize(self.prediction_set, self.label)

    @property
    def correct(self) -> bool:
        return int(np.argmax(self.probs)) == self.label

    def with_set(self, pred_set) -> "PatientRecord":
        return dataclasses.replace(self, prediction_set=tuple(int(k) for k in pred_set))

    def group(self, field: str) -> str:
        if field == "sex":
            return self.sex
        if field in ("race-group", "race_group"):
            return self.race_group
        raise ValueError(f"unknown group field {field!r}")


def _group_means(keys, values) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sorted unique keys, per-key mean rows, and inverse index (rows summed in input order)."""
    uniq, inv = np.unique(np.asarray(keys), return_inverse=True)
    sums = np.zeros((len(uniq), values.shape[1]))
    np.add.at(sums, inv, values)
    counts = np.bincount(inv, minlength=len(uniq))
    return uniq, sums / counts[:, None], inv


def aggregate(tile_probs, manifest, keep=None) -> list[PatientRecord]:
    """Average tiles within slides, then slides within patients.

    ``keep`` is an optional boolean tile mask (EAT), applied before averaging;
    every slide must retain at least one tile. Records come back sorted by
    patient id.
    """
    P = np.atleast_2d(np.asarray(tile_probs, dtype=np.float64))
    n = len(manifest.tile_id)
    if P.shape[0] != n:
        raise ValueError(f"{P.shape[0]} tile probability rows for {n} manifest rows (orphan tiles)")
    rows = np.arange(n) if keep is None else np.flatnonzero(np.asarray(keep, dtype=bool))
    sid = np.asarray(manifest.slide_id, dtype=object)
    slides_all = set(sid.tolist())
    slides, slide_P, _ = _group_means(sid[rows].astype(str), P[rows])
    if len(slides) != len(slides_all):
        raise ValueError("a slide lost all of its tiles")
    slide_patient = dict(zip(manifest.slide_id, manifest.patient_id))
    first = {}
    for i, p in enumerate(manifest.patient_id):
        first.setdefault(p, i)
    owners = np.array([slide_patient[s] for s in slides])
    patients, patient_P, inv = _group_means(owners, slide_P)
    out = []
    for j, p in enumerate(patients):
        members = np.flatnonzero(inv == j)
        i = first[p]
        out.append(
            PatientRecord(
                patient_id=str(p),
                slide_ids=tuple(str(s) for s in slides[members]),
                slide_probs=slide_P[members],
                probs=patient_P[j],
                label=int(manifest.label[i]),
                sex=manifest.sex[i],
                race_group=manifest.race_group[i],
            )
        )
    return out


def patient_arrays(records) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into ``(probs (n, K), labels (n,))``."""
    return np.stack([r.probs for r in records]), np.array([r.label for r in records], dtype=np.int64)


def breakdown(records) -> dict[str, int]:
    counts = Counter()
    for r in records:
        if r.prediction_set is None:
            raise ValueError(f"patient {r.patient_id} has no prediction set")
        counts[r.breakdown] += 1
    return {c: counts.get(c, 0) for c in BREAKDOWN_CATEGORIES}


def da_error_rate(records) -> float | None:
    """Wrong singletons over all singletons; ``None`` if no patient got a singleton."""
    b = breakdown(records)
    single = b["single-correct"] + b["single-incorrect"]
    return None if single == 0 else b["single-incorrect"] / single


def merged_groups(records, group_field: str, min_size: int = 20) -> list[str]:
    """Group label per record, with groups smaller than ``min_size`` merged into ``Others``."""
    raw = [r.group(group_field) for r in records]
    sizes = Counter(raw)
    return [g if sizes[g] >= min_size else OTHERS for g in raw]


def fairness_gap(records, metric: str = "accuracy", group_field: str = "sex", min_group_size: int = 20) -> float:
    """Max minus min of a per-group metric (``accuracy`` or ``avg-set-size``)."""
    records = list(records)
    if metric == "accuracy":
        values = np.array([r.correct for r in records], dtype=np.float64)
    elif metric == "avg-set-size":
        if any(r.prediction_set is None for r in records):
            raise ValueError("avg-set-size needs prediction sets")
        values = np.array([len(r.prediction_set) for r in records], dtype=np.float64)
    else:
        raise ValueError(f"unknown fairness metric {metric!r}")
    groups = np.array(merged_groups(records, group_field, min_group_size), dtype=object)
    names = sorted(set(groups.tolist()))
    if len(names) < 2:
        raise ValueError(f"fairness gap needs >= 2 groups, got {names}")
    per_group = [values[groups == g].mean() for g in names]
    return float(max(per_group) - min(per_group))
