"""Patient-level train/val/calibration-test partitions with repeated CP resplits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from truecam.data.io import Manifest
from truecam.numerics import make_rng


@dataclass(frozen=True)
class ModelSplit:
    model: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    caltest: tuple[str, ...]
    resplits: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]  # (calibration, test)


@dataclass(frozen=True)
class SplitPlan:
    ratios: tuple[float, float, float]
    cal_size: int
    seed: int
    models: tuple[ModelSplit, ...]


def partition_sizes(n: int, ratios) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return n_train, n_val, n - n_train - n_val


def make_split_plan(
    patients: Manifest | list[str],
    ratios=(0.65, 0.15, 0.20),
    n_models: int = 20,
    n_resplits: int = 500,
    cal_size: int = 100,
    seed: int = 0,
) -> SplitPlan:
    """Shuffle patients per model, cut 65/15/20, then resplit the last part for CP.

    In-D patients only: OOD patients (label -1) are excluded from manifests.
    """
    if isinstance(patients, Manifest):
        ood = {p for p, l in zip(patients.patient_id, patients.label) if l < 0}
        ids = [p for p in patients.patients() if p not in ood]
    else:
        ids = list(dict.fromkeys(patients))
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train, n_val, n_caltest = partition_sizes(len(ids), ratios)
    if cal_size < 1 or cal_size > n_caltest:
        raise ValueError(f"cal_size={cal_size} does not fit a calibration/test pool of {n_caltest}")
    models = []
    for m in range(n_models):
        order = make_rng([seed, m]).permutation(len(ids))
        shuffled = [ids[i] for i in order]
        train = tuple(shuffled[:n_train])
        val = tuple(shuffled[n_train : n_train + n_val])
        caltest = tuple(shuffled[n_train + n_val :])
        resplits = []
        for r in range(n_resplits):
            perm = make_rng([seed, m, r]).permutation(n_caltest)
            resplits.append(
                (tuple(caltest[i] for i in perm[:cal_size]), tuple(caltest[i] for i in perm[cal_size:]))
            )
        models.append(ModelSplit(m, train, val, caltest, tuple(resplits)))
    return SplitPlan(ratios, cal_size, seed, tuple(models))


def resplit_indices(n_pool: int, cal_size: int, n_resplits: int, seed) -> np.ndarray:
    """Index form of the CP resplits: row r is a permutation; the first ``cal_size`` calibrate."""
    base = [seed] if isinstance(seed, int) else list(seed)
    return np.stack([make_rng(base + [r]).permutation(n_pool) for r in range(n_resplits)])
