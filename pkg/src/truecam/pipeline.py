"""End-to-end experiments shared by the CLI, the scripts and the acceptance suite.

Every experiment is a pure function of its configs and seeds. Per-seed work
is independent; results are reduced in seed / resplit order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from truecam.conformal import crc_fit, crc_mask, nonconformity_scores, quantile_rank, set_mask
from truecam.data import ScenarioConfig, gen_eat_scenario, gen_ind_scenario, gen_ood_scenario, make_split_plan
from truecam.data.scenarios import n_ood_patients
from truecam.numerics import make_rng
from truecam.sngp_head import SngpHead, SnMlpConfig, TrainConfig, fit_head, predict
from truecam.trust import (
    PatientRecord,
    aggregate,
    breakdown,
    da_error_rate,
    eat_keep_mask,
    fairness_gap,
    fit_eat_cluster,
    nearest_center,
    ood_score_probability,
    ood_score_uncertainty,
    tuned_threshold,
)

ALPHAS = (0.1, 0.05, 0.01)


@dataclass(frozen=True)
class HeadConfig:
    """Head hyper-parameters used by all experiments (desk-scale learning rate)."""

    hidden: tuple[int, ...] = (64, 64)
    rff_dim: int = 1024
    tau: float = 1.0
    lengthscale: float = 1.0
    c: float = 0.95
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=4, lr=3e-3))

    def replace(self, **kw) -> "HeadConfig":
        return dataclasses.replace(self, **kw)


def train_head(X, y, cfg: HeadConfig = HeadConfig(), seed: int = 0) -> SngpHead:
    X = np.asarray(X, dtype=np.float64)
    mlp = SnMlpConfig(layer_dims=(X.shape[1], *cfg.hidden), c=cfg.c)
    return fit_head(X, y, dataclasses.replace(cfg.train, seed=seed), mlp, rff=cfg.rff_dim,
                    tau=cfg.tau, lengthscale=cfg.lengthscale)


def score_tiles(head: SngpHead, X, batch: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Tile probabilities and GP uncertainties, computed in fixed-size batches."""
    X = np.asarray(X, dtype=np.float64)
    probs, unc = [], []
    for i in range(0, X.shape[0], batch):
        out = predict(X[i : i + batch], head)
        probs.append(out.probs)
        unc.append(out.uncertainty)
    return np.vstack(probs), np.concatenate(unc)


@dataclass(frozen=True)
class PatientTable:
    """Patient-level view of a scored cohort, sorted by patient id."""

    records: tuple[PatientRecord, ...]
    probs: np.ndarray
    labels: np.ndarray
    score_probability: np.ndarray
    score_uncertainty: np.ndarray

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def index(self, patient_ids) -> np.ndarray:
        pos = {p: i for i, p in enumerate(self.ids)}
        return np.array([pos[p] for p in patient_ids], dtype=np.int64)

    def score(self, kind: str) -> np.ndarray:
        return self.score_probability if kind == "probability" else self.score_uncertainty


def patient_table(manifest, tile_probs, tile_unc, keep=None, delta: int = 200) -> PatientTable:
    """Aggregate class probabilities (after optional EAT) and OOD scores (all tiles) per patient."""
    records = aggregate(tile_probs, manifest, keep)
    _, inv = np.unique(np.asarray(manifest.patient_id), return_inverse=True)
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(records) + 1))
    s_prob, s_unc = [], []
    for j in range(len(records)):
        rows = order[bounds[j] : bounds[j + 1]]
        s_prob.append(ood_score_probability(tile_probs[rows]))
        s_unc.append(ood_score_uncertainty(tile_unc[rows], delta))
    records = tuple(dataclasses.replace(r, score_ood=u) for r, u in zip(records, s_unc))
    probs = np.stack([r.probs for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    return PatientTable(records, probs, labels, np.array(s_prob), np.array(s_unc))


def q_hat_from_scores(scores: np.ndarray, alpha: float) -> float:
    k = quantile_rank(len(scores), alpha)
    return 1.0 if k > len(scores) else float(np.partition(scores, k - 1)[k - 1])


def _fairness(records) -> dict:
    out = {}
    for fld in ("sex", "race-group"):
        for metric in ("accuracy", "avg-set-size"):
            try:
                out[f"{fld}/{metric}"] = fairness_gap(records, metric, fld)
            except ValueError:
                out[f"{fld}/{metric}"] = None
    return out


def evaluate_alpha(cal_probs, cal_labels, test: PatientTable, alpha: float) -> tuple[dict, list[PatientRecord]]:
    """Calibrate on patient-level probabilities and report trust metrics for one alpha."""
    q = q_hat_from_scores(nonconformity_scores(cal_probs, cal_labels), alpha)
    row, recs = evaluate_with_threshold(test, alpha, q)
    row["n_calibration"] = int(len(cal_labels))
    return row, recs


def evaluate_with_threshold(test: PatientTable, alpha: float, q: float) -> tuple[dict, list[PatientRecord]]:
    """Prediction sets at a fixed ``q_hat`` plus coverage, breakdown, DA error and fairness gaps."""
    mask = set_mask(test.probs, q)
    recs = [r.with_set(np.flatnonzero(m)) for r, m in zip(test.records, mask)]
    covered = mask[np.arange(len(recs)), np.clip(test.labels, 0, None)] & (test.labels >= 0)
    row = {
        "alpha": alpha,
        "q_hat": q,
        "n_test": len(recs),
        "coverage": float(covered.mean()),
        "avg_set_size": float(mask.sum(1).mean()),
        "breakdown": breakdown(recs),
        "da_error_rate": da_error_rate(recs),
        "fairness": _fairness(recs),
    }
    return row, recs


# ---------------------------------------------------------------------------
# repeated-split coverage (In-D)


def _cp_resplit_stats(P, y, perms, cal_size, alpha):
    """Coverage and DA error of standard CP over each row of ``perms``."""
    cov, da = [], []
    scores = 1.0 - P[np.arange(len(y)), y]
    for perm in perms:
        cal, test = perm[:cal_size], perm[cal_size:]
        q = q_hat_from_scores(scores[cal], alpha)
        m = set_mask(P[test], q)
        yt = y[test]
        hit = m[np.arange(len(yt)), yt]
        cov.append(hit.mean())
        single = m.sum(1) == 1
        da.append(np.nan if not single.any() else float((single & ~hit).sum() / single.sum()))
    return np.array(cov), np.array(da)


@dataclass(frozen=True)
class CoverageResult:
    alphas: tuple[float, ...]
    coverage: np.ndarray  # (seeds, alphas, resplits)
    da_error: np.ndarray  # (seeds, alphas, resplits), NaN where undefined
    accuracy: np.ndarray  # (seeds,) patient accuracy on the caltest pool

    def mean_coverage(self) -> np.ndarray:
        return self.coverage.mean(axis=(0, 2))

    def mean_da_error(self) -> np.ndarray:
        """Per-alpha DA error averaged over seeds (each seed: mean over defined resplits)."""
        per_seed = np.array([[np.nanmean(r) if np.isfinite(r).any() else np.nan for r in s] for s in self.da_error])
        defined = np.isfinite(per_seed)
        total = np.where(defined, per_seed, 0.0).sum(0)
        n = defined.sum(0)
        return np.where(n > 0, total / np.maximum(n, 1), np.nan)


def coverage_experiment(
    scenario: ScenarioConfig = ScenarioConfig(n_patients=600),
    n_train: int = 400,
    cal_size: int = 100,
    seeds=range(20),
    n_resplits: int = 100,
    alphas=ALPHAS,
    head: HeadConfig = HeadConfig(),
) -> CoverageResult:
    """Train per seed on ``n_train`` patients, then resplit the rest into calibration/test."""
    cov, da, acc = [], [], []
    for seed in seeds:
        s = gen_ind_scenario(scenario.replace(seed=seed))
        n = scenario.n_patients
        plan = make_split_plan(s.manifest, ratios=(n_train / n, 0.0, 1 - n_train / n), n_models=1,
                               n_resplits=0, cal_size=cal_size, seed=seed)
        ms = plan.models[0]
        rows = s.manifest.rows_for_patients(ms.train)
        h = train_head(s.embeddings[rows], s.manifest.label[rows], head, seed)
        pool_rows = s.manifest.rows_for_patients(ms.caltest)
        sub = s.manifest.subset(pool_rows)
        P, U = score_tiles(h, s.embeddings[pool_rows])
        table = patient_table(sub, P, U)
        acc.append(float((table.probs.argmax(1) == table.labels).mean()))
        perms = np.stack([make_rng([seed, 1, r]).permutation(len(table.ids)) for r in range(n_resplits)])
        c_s, d_s = zip(*(_cp_resplit_stats(table.probs, table.labels, perms, cal_size, a) for a in alphas))
        cov.append(c_s)
        da.append(d_s)
    return CoverageResult(tuple(alphas), np.array(cov), np.array(da), np.array(acc))


# ---------------------------------------------------------------------------
# EAT


@dataclass(frozen=True)
class EatResult:
    accuracy_plain: np.ndarray  # (seeds,)
    accuracy_eat: np.ndarray
    mixed_blob_found: np.ndarray  # (seeds,) bool
    elimination_rate: np.ndarray


def eat_experiment(
    scenario: ScenarioConfig = ScenarioConfig(n_patients=200),
    seeds=range(20),
    head: HeadConfig = HeadConfig(),
    k: int = 3,
) -> EatResult:
    """Patient accuracy on held-out patients with and without cluster-mode EAT.

    The plain head trains on all training tiles; its tile probabilities feed
    the ambiguity tie-break of the clustering. The EAT head retrains on the
    retained tiles and is evaluated on EAT-filtered test slides.
    """
    plain, eat, found, rate = [], [], [], []
    for seed in seeds:
        s = gen_eat_scenario(scenario.replace(seed=seed))
        plan = make_split_plan(s.manifest, ratios=(0.65, 0.15, 0.20), n_models=1, n_resplits=0, cal_size=1, seed=seed)
        ms = plan.models[0]
        tr = s.manifest.rows_for_patients(ms.train)
        te = s.manifest.rows_for_patients(ms.val + ms.caltest)
        X, m = s.embeddings, s.manifest
        h0 = train_head(X[tr], m.label[tr], head, seed)
        P_tr, _ = score_tiles(h0, X[tr])
        filt = fit_eat_cluster(X[tr], P_tr, m.label[tr], k=k, rng=make_rng([seed, 7]))
        members = nearest_center(X[tr], filt.centers) == filt.ambiguous_cluster_id
        found.append(bool((s.blob[tr][members] == 2).mean() > 0.5))
        keep_tr = eat_keep_mask(filt, np.asarray(m.slide_id)[tr], X[tr])
        rate.append(1.0 - keep_tr.mean())
        h1 = train_head(X[tr][keep_tr], m.label[tr][keep_tr], head, seed)
        sub = m.subset(te)
        P0, U0 = score_tiles(h0, X[te])
        t0 = patient_table(sub, P0, U0)
        keep_te = eat_keep_mask(filt, np.asarray(sub.slide_id), X[te])
        P1, U1 = score_tiles(h1, X[te])
        t1 = patient_table(sub, P1, U1, keep=keep_te)
        plain.append(float((t0.probs.argmax(1) == t0.labels).mean()))
        eat.append(float((t1.probs.argmax(1) == t1.labels).mean()))
    return EatResult(np.array(plain), np.array(eat), np.array(found), np.array(rate))


# ---------------------------------------------------------------------------
# OOD gating and CRC


@dataclass(frozen=True)
class OodConfig:
    n_in: int = 400  # In-D patients: train / tune / calibration+test
    n_train: int = 200
    n_tune: int = 50
    n_tune_ood: int = 50
    ratios: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    alpha: float = 0.05
    target_tpr: float = 1.0
    score_kind: str = "uncertainty"
    delta: int = 200
    n_resplits: int = 100
    crc_tol: float = 1e-4


@dataclass(frozen=True)
class OodResult:
    ratios: tuple[float, ...]
    auroc: np.ndarray  # (seeds,) tuning-stream AUROC of the gate score
    ungated: np.ndarray  # (seeds, ratios) mean coverage of In-D-calibrated CP without a gate
    gated: np.ndarray  # (seeds, ratios) same with the gate
    crc: np.ndarray  # (seeds, ratios) gate + CRC on the contaminated calibration stream
    rho_hat: np.ndarray  # (seeds, ratios) mean fitted rho
    retained_ood: np.ndarray  # (seeds, ratios) fraction of test OOD patients passing the gate


def ood_sweep(table: PatientTable, tune_in, tune_ood, caltest, pool, cfg: OodConfig, seed: int) -> dict:
    """Coverage-vs-ratio sweep on one scored cohort (indices into ``table``).

    The gate threshold is tuned on ``tune_in`` vs ``tune_ood`` at
    ``cfg.target_tpr``. For each ratio the first ``round(ratio * len(caltest))``
    patients of ``pool`` join the stream. Each resplit halves ``caltest`` and
    sends every OOD patient to calibration or test by a per-patient coin,
    so calibration streams are nested across ratios.
    """
    from truecam.numerics import auroc

    score = table.score(cfg.score_kind)
    tune_idx = np.r_[tune_in, tune_ood]
    tune_flag = np.r_[np.zeros(len(tune_in)), np.ones(len(tune_ood))]
    thr = tuned_threshold(score[tune_idx], tune_flag, "target-tpr", cfg.target_tpr)
    n_ct = len(caltest)
    out = {"threshold": thr, "auroc": auroc(score[tune_idx], tune_flag), "ratio": [], "n_ood": [],
           "ungated": [], "gated": [], "crc": [], "rho_hat": [], "retained_ood": []}
    P, Y = table.probs, table.labels
    for ratio in cfg.ratios:
        n_ood = n_ood_patients(n_ct, ratio)
        if n_ood > len(pool):
            raise ValueError(f"ratio {ratio} needs {n_ood} OOD patients, only {len(pool)} available")
        ood_idx = pool[:n_ood]
        u_, g_, c_, r_, l_ = [], [], [], [], []
        for r in range(cfg.n_resplits):
            rng = make_rng([seed, 2, r])
            perm = rng.permutation(n_ct)
            to_cal = rng.random(len(pool))[:n_ood] < 0.5
            cal_in, test_in = caltest[perm[: n_ct // 2]], caltest[perm[n_ct // 2 :]]
            cal_ood, test_ood = ood_idx[to_cal], ood_idx[~to_cal]
            test = np.r_[test_in, test_ood]
            y_test = np.r_[Y[test_in], -np.ones(len(test_ood), dtype=np.int64)]
            q = q_hat_from_scores(1.0 - P[cal_in, Y[cal_in]], cfg.alpha)
            u_.append(_coverage(set_mask(P[test], q), y_test))
            passed = score[test] <= thr
            g_.append(_coverage(set_mask(P[test][passed], q), y_test[passed]))
            cal = np.r_[cal_in, cal_ood]
            y_cal = np.r_[Y[cal_in], -np.ones(len(cal_ood), dtype=np.int64)]
            keep_cal = score[cal] <= thr
            ctl = crc_fit(P[cal][keep_cal], y_cal[keep_cal], cfg.alpha, cfg.crc_tol)
            c_.append(_coverage(crc_mask(P[test][passed], ctl.rho_hat), y_test[passed]))
            r_.append(ctl.rho_hat)
            l_.append(float(passed[len(test_in) :].mean()) if len(test_ood) else 0.0)
        out["ratio"].append(ratio)
        out["n_ood"].append(n_ood)
        for key, vals in (("ungated", u_), ("gated", g_), ("crc", c_), ("rho_hat", r_), ("retained_ood", l_)):
            out[key].append(float(np.nanmean(vals)))
    return out


def ood_experiment(
    scenario: ScenarioConfig = ScenarioConfig(),
    cfg: OodConfig = OodConfig(),
    seeds=range(10),
    head: HeadConfig = HeadConfig(),
) -> OodResult:
    """Per seed: train on In-D patients, then run :func:`ood_sweep` on the rest."""
    n_ct = cfg.n_in - cfg.n_train - cfg.n_tune
    n_ood_total = cfg.n_tune_ood + n_ood_patients(n_ct, max(cfg.ratios))
    rows_out = []
    for seed in seeds:
        s = gen_ood_scenario(scenario.replace(seed=seed, n_patients=cfg.n_in), n_ood_total / cfg.n_in)
        m = s.manifest
        ind_ids = [p for p in m.patients() if not p.startswith("O")]
        ood_ids = [p for p in m.patients() if p.startswith("O")][:n_ood_total]
        order = make_rng([seed, 0]).permutation(len(ind_ids))
        ind_ids = [ind_ids[i] for i in order]
        rows = m.rows_for_patients(ind_ids[: cfg.n_train])
        h = train_head(s.embeddings[rows], m.label[rows], head, seed)
        P, U = score_tiles(h, s.embeddings)
        table = patient_table(m, P, U, delta=cfg.delta)
        rows_out.append(ood_sweep(
            table,
            table.index(ind_ids[cfg.n_train : cfg.n_train + cfg.n_tune]),
            table.index(ood_ids[: cfg.n_tune_ood]),
            table.index(ind_ids[cfg.n_train + cfg.n_tune :]),
            table.index(ood_ids[cfg.n_tune_ood :]),
            cfg, seed,
        ))

    def stack(key):
        return np.array([r[key] for r in rows_out])

    return OodResult(tuple(cfg.ratios), stack("auroc"), stack("ungated"), stack("gated"), stack("crc"),
                     stack("rho_hat"), stack("retained_ood"))


def _coverage(mask: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    ok = labels >= 0
    hit = np.zeros(len(labels), dtype=bool)
    hit[ok] = mask[np.flatnonzero(ok), labels[ok]]
    return float(hit.mean())
