"""Seeded synthetic cohorts standing in for real tile embeddings.

Every patient is drawn from its own PCG64 stream keyed on
``(seed, stream, patient_index)``, so growing a cohort (e.g. adding OOD
patients) never changes the patients already generated. Embeddings are
rounded to float32 on creation so in-memory data equals what ``EMB1``
files hold.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from truecam.data.io import OOD_LABEL, Manifest
from truecam.numerics import make_rng

SEXES = ("female", "male")
RACE_GROUPS = ("white", "asian", "black", "other", "not-reported")
RACE_PROBS = (0.70, 0.12, 0.08, 0.03, 0.07)

_IND, _OOD, _EAT = 0, 1, 2


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs of the synthetic cohorts; distances are in units of ``spread``.

    Class blobs sit at ``-separation/2`` and ``+separation/2`` on axis 0.
    Each slide gets a random offset with std ``slide_spread``. OOD patients
    are In-D-like patients shifted by ``ood_offset`` along ``ood_axis``.
    The EAT scenario adds a mixed blob at ``separation`` on axis 1 that
    receives a fraction ``eat_mix`` of every slide's tiles.
    """

    n_patients: int = 200
    slides_per_patient: float = 3.1
    tiles_per_slide: int = 12
    dim: int = 16
    separation: float = 3.0
    spread: float = 1.0
    slide_spread: float = 0.6
    ood_offset: float = 6.0
    ood_axis: int = 1
    eat_mix: float = 0.5
    purity: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1 or self.tiles_per_slide < 1 or self.dim < 2:
            raise ValueError("counts must be positive and dim >= 2")
        if self.slides_per_patient < 1:
            raise ValueError("slides_per_patient must be >= 1")
        if self.spread <= 0 or self.slide_spread < 0:
            raise ValueError("spreads must be positive")
        if not 0 <= self.eat_mix < 1 or not 0.5 <= self.purity <= 1:
            raise ValueError("eat_mix must lie in [0, 1) and purity in [0.5, 1]")
        if not 0 <= self.ood_axis < self.dim:
            raise ValueError("ood_axis out of range")

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)


def read_scenario_config(path) -> ScenarioConfig:
    """Parse a flat ``key = value`` file (``#`` comments) into a ScenarioConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[scenario]\n" + Path(path).read_text(encoding="utf-8"))
    fields = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    kw = {}
    for key, raw in parser["scenario"].items():
        if key not in fields:
            raise ValueError(f"{path}: unknown scenario key {key!r}")
        kw[key] = (int if fields[key].type in ("int", int) else float)(raw)
    return ScenarioConfig(**kw)


def write_scenario_config(path, cfg: ScenarioConfig) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Scenario:
    embeddings: np.ndarray
    manifest: Manifest
    latent_label: np.ndarray  # per tile: class the tiles were generated from (OOD rows too)
    blob: np.ndarray  # per tile: 0/1 class blob, 2 mixed blob

    @property
    def is_ood(self) -> np.ndarray:
        return self.manifest.is_ood


def _class_means(cfg: ScenarioConfig) -> np.ndarray:
    mu = np.zeros((3, cfg.dim))
    mu[0, 0] = -cfg.separation / 2
    mu[1, 0] = cfg.separation / 2
    mu[2, 1] = cfg.separation
    return mu * cfg.spread


def _patient(cfg: ScenarioConfig, stream: int, i: int, mixed: bool):
    rng = make_rng([cfg.seed, stream, i])
    label = int(rng.integers(2))
    sex = SEXES[int(rng.integers(2))]
    race = RACE_GROUPS[int(rng.choice(len(RACE_GROUPS), p=RACE_PROBS))]
    n_slides = 1 + int(rng.poisson(cfg.slides_per_patient - 1))
    mu = _class_means(cfg)
    tiles, blobs = [], []
    for _ in range(n_slides):
        offset = rng.standard_normal(cfg.dim) * cfg.slide_spread * cfg.spread
        n = cfg.tiles_per_slide
        if mixed:
            u = rng.random(n)
            flip = rng.random(n) >= cfg.purity
            blob = np.where(u < cfg.eat_mix, 2, np.where(flip, 1 - label, label))
        else:
            blob = np.full(n, label)
        tiles.append(mu[blob] + offset + rng.standard_normal((n, cfg.dim)) * cfg.spread)
        blobs.append(blob)
    return label, sex, race, tiles, blobs


def _build(cfg: ScenarioConfig, specs) -> Scenario:
    """``specs``: iterable of (stream, index, prefix, mixed, ood)."""
    rows, blob_rows = [], []
    tid, sid, pid, lab, sexes, races, latent = [], [], [], [], [], [], []
    for stream, i, prefix, mixed, ood in specs:
        label, sex, race, tiles, blobs = _patient(cfg, stream, i, mixed)
        p = f"{prefix}{i:05d}"
        for s, (T, B) in enumerate(zip(tiles, blobs)):
            if ood:
                T = T.copy()
                T[:, cfg.ood_axis] += cfg.ood_offset * cfg.spread
            rows.append(T)
            blob_rows.append(B)
            slide = f"{p}-S{s}"
            for t in range(len(T)):
                tid.append(f"{slide}-T{t:03d}")
                sid.append(slide)
                pid.append(p)
                lab.append(OOD_LABEL if ood else label)
                sexes.append(sex)
                races.append(race)
                latent.append(label)
    X = np.vstack(rows).astype(np.float32).astype(np.float64)
    m = Manifest(tuple(tid), tuple(sid), tuple(pid), np.array(lab, dtype=np.int64), tuple(sexes), tuple(races))
    return Scenario(X, m, np.array(latent, dtype=np.int64), np.concatenate(blob_rows))


def gen_ind_scenario(cfg: ScenarioConfig) -> Scenario:
    """Two Gaussian class blobs; tiles grouped into slides and patients."""
    return _build(cfg, ((_IND, i, "P", False, False) for i in range(cfg.n_patients)))


def n_ood_patients(n_patients: int, ratio: float) -> int:
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    return int(round(ratio * n_patients))


def gen_ood_scenario(cfg: ScenarioConfig, ratio: float) -> Scenario:
    """In-D cohort plus ``round(ratio * n_patients)`` shifted patients labelled -1.

    OOD patients come from their own stream, so a higher ratio extends the
    OOD set of a lower ratio.
    """
    n_ood = n_ood_patients(cfg.n_patients, ratio)
    specs = [(_IND, i, "P", False, False) for i in range(cfg.n_patients)]
    specs += [(_OOD, i, "O", False, True) for i in range(n_ood)]
    return _build(cfg, specs)


def gen_eat_scenario(cfg: ScenarioConfig) -> Scenario:
    """Three blobs: one per class (at ``purity``) plus a 50/50 mixed blob."""
    return _build(cfg, ((_EAT, i, "P", True, False) for i in range(cfg.n_patients)))
