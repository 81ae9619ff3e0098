import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    breakdown_by_hand,
    fairness_gap_by_hand,
    ood_prob_by_hand,
    ood_unc_by_hand,
    pairwise_auroc,
)
from truecam.data import Manifest, ScenarioConfig, gen_eat_scenario, gen_ood_scenario
from truecam.numerics import auroc, make_rng
from truecam.trust import (
    EatFilter,
    NoAmbiguousCluster,
    OodGate,
    PatientRecord,
    ThresholdUnattainable,
    aggregate,
    ambiguity_score,
    breakdown,
    da_error_rate,
    dsc_filter,
    eat_keep_mask,
    eliminate_tiles,
    fairness_gap,
    fit_eat_cluster,
    fit_eat_threshold,
    fit_logistic_proxy,
    gate,
    nearest_center,
    ood_score_probability,
    ood_score_uncertainty,
    tune_gate,
    tuned_threshold,
)

probs2 = st.floats(0, 1).map(lambda p: (p, 1 - p))


def manifest(rows):
    """rows: (tile, slide, patient, label[, sex, race])."""
    rows = [r + ("f", "w")[len(r) - 4 :] if len(r) < 6 else r for r in rows]
    cols = list(zip(*rows))
    return Manifest(cols[0], cols[1], cols[2], np.array(cols[3]), cols[4], cols[5])


def record(pid, label, pred_set=None, probs=(0.5, 0.5), sex="f", race="w"):
    p = np.asarray(probs, dtype=float)
    return PatientRecord(pid, ("s",), p[None], p, label, sex, race, pred_set)


# --- ambiguity -------------------------------------------------------------


@pytest.mark.parametrize("p, s", [((0.5, 0.5), 1.0), ((1.0, 0.0), 0.0), ((0.8, 0.2), 1 - (0.8 - 0.2))])
def test_ambiguity_examples(p, s):
    assert ambiguity_score(p) == s


def test_ambiguity_binary_only():
    with pytest.raises(ValueError):
        ambiguity_score((0.2, 0.3, 0.5))


@given(probs2)
def test_ambiguity_symmetric_and_bounded(p):
    a, b = p
    s = ambiguity_score((a, b))
    assert s == ambiguity_score((b, a))
    assert 0.0 <= s <= 1.0


def test_logistic_proxy_probabilities():
    rng = make_rng(0)
    y = rng.integers(0, 2, 400)
    X = rng.standard_normal((400, 5)) + 2.0 * y[:, None] * np.eye(5)[0]
    m = fit_logistic_proxy(X, y)
    P = m.predict_proba(X)
    assert np.allclose(P.sum(1), 1) and (P >= 0).all()
    assert ((P[:, 1] > 0.5) == y).mean() > 0.8
    assert m.kind == "logistic-proxy"
    s = m.score(X)
    assert s.shape == (400,) and (s >= 0).all() and (s <= 1).all()


# --- EAT -------------------------------------------------------------------


def three_blobs(rng, n_per=10, n_slides=40):
    """Blob A (95% class 0), blob B (95% class 1), blob C (50/50), well apart."""
    centers = np.array([[-8.0, 0, 0], [8.0, 0, 0], [0, 8.0, 0]])
    X, lab, blob = [], [], []
    for b, purity in ((0, 0.95), (1, 0.95), (2, 0.5)):
        n = n_per * n_slides
        X.append(centers[b] + rng.standard_normal((n, 3)))
        if b < 2:
            y = np.where(rng.random(n) < purity, b, 1 - b)
        else:
            y = np.arange(n) % 2
        lab.append(y)
        blob.append(np.full(n, b))
    return np.vstack(X), np.concatenate(lab), np.concatenate(blob)


def test_eat_cluster_picks_mixed_blob():
    X, y, blob = three_blobs(make_rng(1))
    f = fit_eat_cluster(X, np.full((len(y), 2), 0.5), y, rng=make_rng(2))
    members = nearest_center(X, f.centers) == f.ambiguous_cluster_id
    assert np.array_equal(members, blob == 2)
    assert min(f.dominance) == f.dominance[f.ambiguous_cluster_id] == 0.5
    assert f.training_elimination_rate == pytest.approx(1 / 3)


def test_eat_cluster_deterministic():
    X, y, _ = three_blobs(make_rng(3))
    P = np.full((len(y), 2), 0.5)
    a = fit_eat_cluster(X, P, y, rng=make_rng(9))
    b = fit_eat_cluster(X, P, y, rng=make_rng(9))
    assert np.array_equal(a.centers, b.centers) and a.ambiguous_cluster_id == b.ambiguous_cluster_id


def test_eat_cluster_pure_blobs_degenerate():
    rng = make_rng(4)
    X = np.vstack([rng.standard_normal((50, 2)) - 6, rng.standard_normal((50, 2)) + 6])
    y = np.r_[np.zeros(50, int), np.ones(50, int)]
    with pytest.raises(NoAmbiguousCluster):
        fit_eat_cluster(X, np.full((100, 2), 0.5), y, k=2, rng=rng)


def test_eat_cluster_ties_go_to_higher_ambiguity():
    # two perfectly mixed clusters; the one with less confident probs is ambiguous
    rng = make_rng(5)
    X = np.vstack([rng.standard_normal((40, 2)) - 10, rng.standard_normal((40, 2)) + 10])
    y = np.tile([0, 1], 40)
    P = np.vstack([np.tile([0.9, 0.1], (40, 1)), np.tile([0.55, 0.45], (40, 1))])
    f = fit_eat_cluster(X, P, y, k=2, rng=rng)
    assert nearest_center(X[40:], f.centers)[0] == f.ambiguous_cluster_id


def test_eat_k_must_be_at_least_two():
    with pytest.raises(ValueError):
        fit_eat_cluster(np.zeros((4, 2)), np.full((4, 2), 0.5), [0, 1, 0, 1], k=1)


def test_eliminate_drops_exactly_blob_c():
    rng = make_rng(6)
    X, y, _ = three_blobs(rng)
    f = fit_eat_cluster(X, np.full((len(y), 2), 0.5), y, rng=rng)
    centers = np.array([[-8.0, 0, 0], [8.0, 0, 0], [0, 8.0, 0]])
    slide = np.vstack([c + 0.5 * rng.standard_normal((10, 3)) for c in centers])
    keep = eliminate_tiles(f, slide)
    assert keep.tolist() == list(range(20))


def test_eliminate_fallback_keeps_least_ambiguous():
    f = EatFilter("cluster", centers=np.array([[0.0, 0.0], [10.0, 10.0]]), ambiguous_cluster_id=0)
    tiles = np.zeros((4, 2)) + np.arange(4)[:, None] * 0.1
    amb = np.array([0.9, 0.3, 0.8, 0.6])
    assert eliminate_tiles(f, tiles, amb).tolist() == [1]
    assert eliminate_tiles(f, tiles).tolist() == [3]


def test_eliminate_empty_slide():
    f = EatFilter("threshold", threshold=0.5)
    with pytest.raises(ValueError):
        eliminate_tiles(f, ambiguity=np.array([]))


def test_threshold_mode_rate_zero_keeps_all():
    amb = make_rng(7).random(100)
    f = fit_eat_threshold(amb, 0.0)
    assert eliminate_tiles(f, ambiguity=amb).tolist() == list(range(100))


def test_threshold_mode_hits_target_rate():
    amb = make_rng(8).random(1000)
    f = fit_eat_threshold(amb, 0.6)
    assert f.training_elimination_rate == 0.6
    assert (amb > f.threshold).mean() == 0.6


def test_eat_filter_validation():
    with pytest.raises(ValueError):
        EatFilter("cluster")
    with pytest.raises(ValueError):
        EatFilter("threshold", threshold=0.5, target_elimination_rate=1.0)
    with pytest.raises(ValueError):
        EatFilter("other", threshold=0.5)


def test_eat_keep_mask_per_slide_fallback():
    f = EatFilter("threshold", threshold=0.5)
    amb = np.array([0.9, 0.7, 0.1, 0.95])
    keep = eat_keep_mask(f, ["a", "a", "b", "c"], ambiguity=amb)
    assert keep.tolist() == [False, True, True, True]


def test_eat_scenario_mixed_blob_found():
    s = gen_eat_scenario(ScenarioConfig(n_patients=120, seed=3))
    f = fit_eat_cluster(s.embeddings, np.full((len(s.blob), 2), 0.5), s.manifest.label, rng=make_rng(3))
    members = nearest_center(s.embeddings, f.centers) == f.ambiguous_cluster_id
    assert (s.blob[members] == 2).mean() > 0.9


# --- OOD scores and gates ----------------------------------------------------


def test_ood_probability_examples():
    assert ood_score_probability([[1.0, 0.0], [0.0, 1.0]]) == 0.0
    assert ood_score_probability([[0.9, 0.1], [0.3, 0.7]]) == ood_prob_by_hand([[0.9, 0.1], [0.3, 0.7]])
    assert ood_score_probability([[0.9, 0.1], [0.3, 0.7]]) == pytest.approx(0.2)
    assert ood_score_probability([[0.5, 0.5]] * 3) == 0.5


def test_ood_uncertainty_examples():
    assert ood_score_uncertainty([0.1, 0.2, 0.9], 2) == ood_unc_by_hand([0.1, 0.2, 0.9], 2)
    assert ood_score_uncertainty([0.1, 0.2, 0.9], 2) == pytest.approx(0.15)
    assert ood_score_uncertainty([0.4, 0.2, 0.9], 10) == ood_unc_by_hand([0.4, 0.2, 0.9], 10)
    assert ood_score_uncertainty([0.3] * 5, 2) == 0.3


def test_ood_scores_empty():
    with pytest.raises(ValueError):
        ood_score_probability(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        ood_score_uncertainty([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=30), st.integers(1, 40), st.randoms())
def test_ood_uncertainty_permutation_invariant(u, delta, rnd):
    v = list(u)
    rnd.shuffle(v)
    assert ood_score_uncertainty(u, delta) == ood_score_uncertainty(v, delta)
    assert ood_score_uncertainty(u, delta) == ood_unc_by_hand(u, delta)


@settings(max_examples=50, deadline=None)
@given(st.lists(probs2, min_size=1, max_size=7))
def test_ood_probability_matches_oracle(rows):
    assert ood_score_probability(rows) == ood_prob_by_hand(rows)
    assert 0.0 <= ood_score_probability(rows) <= 0.5


def test_gate_infinite_thresholds():
    hi, lo = OodGate(threshold=np.inf), OodGate(threshold=-np.inf)
    for s in (-1e9, 0.0, 1e9):
        assert gate(s, hi) == "in-domain"
        assert gate(s, lo) == "ood"


def test_gate_rejects_bad_config():
    with pytest.raises(ValueError):
        OodGate(delta=0)
    with pytest.raises(ValueError):
        OodGate(threshold=float("nan"))
    with pytest.raises(ValueError):
        OodGate(score_kind="energy")


SCORES = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
IS_OOD = np.array([0, 0, 1, 0, 0, 1, 1, 1])


def _rates(t):
    flag = SCORES > t
    return flag[IS_OOD == 1].mean(), flag[IS_OOD == 0].mean()


@pytest.mark.parametrize("target", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_target_tpr_threshold(target):
    t = tuned_threshold(SCORES, IS_OOD, "target-tpr", target)
    tpr, _ = _rates(t)
    assert tpr >= target
    # highest such threshold: no tuning score above t could serve instead
    for s in SCORES[SCORES > t]:
        assert _rates(s)[0] < target or s == t


@pytest.mark.parametrize("target", [0.0, 0.25, 0.5, 1.0])
def test_target_fpr_threshold(target):
    t = tuned_threshold(SCORES, IS_OOD, "target-fpr", target)
    assert _rates(t)[1] <= target
    lower = SCORES[SCORES < t]
    if lower.size:
        assert _rates(lower.max())[1] > target


def test_target_fpr_zero_sits_at_max_in_d_score():
    assert tuned_threshold(SCORES, IS_OOD, "target-fpr", 0.0) == 0.5
    assert tuned_threshold(SCORES, IS_OOD, "target-fpr", 1.0) == -np.inf


def test_tuning_errors():
    with pytest.raises(ThresholdUnattainable):
        tuned_threshold(SCORES, IS_OOD, "target-tpr", 1.5)
    with pytest.raises(ThresholdUnattainable):
        tuned_threshold(SCORES, np.zeros(8), "target-tpr", 0.5)


def test_dsc_filter_limits():
    ids = [f"p{i}" for i in range(8)]
    g0 = tune_gate(SCORES, IS_OOD, "target-fpr", 0.0)
    kept, rep = dsc_filter(ids, SCORES, g0)
    assert all(p in kept for p, o in zip(ids, IS_OOD) if not o)
    assert rep.n_total == 8 and rep.n_excluded == 8 - len(kept)
    g1 = tune_gate(SCORES, IS_OOD, "target-fpr", 1.0)
    kept, rep = dsc_filter(ids, SCORES, g1)
    assert kept == [] and rep.n_excluded == 8
    with pytest.raises(ValueError):
        dsc_filter([], [], g1)


def test_far_ood_uncertainty_auroc():
    """Far-shifted patients get higher SNGP uncertainty scores."""
    from truecam.sngp_head import SnMlpConfig, TrainConfig, fit_head, predict

    cfg = ScenarioConfig(n_patients=120, dim=8, seed=1)
    s = gen_ood_scenario(cfg, 1.0)
    ind = ~s.is_ood
    head = fit_head(s.embeddings[ind], s.manifest.label[ind], TrainConfig(epochs=4, lr=3e-3),
                    SnMlpConfig((8, 32, 32)), rff=512)
    out = predict(s.embeddings, head)
    pids = np.array(s.manifest.patient_id)
    scores, flags = [], []
    for p in s.manifest.patients():
        rows = pids == p
        scores.append(ood_score_uncertainty(out.uncertainty[rows], 200))
        flags.append(int(p.startswith("O")))
    assert auroc(scores, flags) > 0.95
    assert auroc(scores, flags) == pytest.approx(pairwise_auroc(scores, flags))


# --- aggregation ------------------------------------------------------------


def test_aggregate_examples():
    m = manifest([("t0", "s0", "p", 0), ("t1", "s0", "p", 0), ("t2", "s1", "p", 0),
                  ("u0", "s2", "q", 1)])
    P = np.array([[0.6, 0.4], [0.8, 0.2], [0.5, 0.5], [0.3, 0.7]])
    recs = aggregate(P, m)
    assert [r.patient_id for r in recs] == ["p", "q"]
    p, q = recs
    assert p.slide_ids == ("s0", "s1")
    assert np.allclose(p.slide_probs, [[0.7, 0.3], [0.5, 0.5]])
    assert np.allclose(p.probs, [0.6, 0.4])
    assert np.array_equal(q.probs, [0.3, 0.7])  # single tile passes through


def test_aggregate_keep_mask_and_orphans():
    m = manifest([("t0", "s0", "p", 0), ("t1", "s0", "p", 0)])
    P = np.array([[0.6, 0.4], [0.8, 0.2]])
    assert np.array_equal(aggregate(P, m, keep=[False, True])[0].probs, [0.8, 0.2])
    with pytest.raises(ValueError):
        aggregate(P, m, keep=[False, False])
    with pytest.raises(ValueError):
        aggregate(P[:1], m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_aggregate_slide_relabel_invariant(seed):
    rng = make_rng(seed)
    n = 30
    slide = rng.integers(0, 6, n)
    rows = [(f"t{i}", f"s{slide[i]}", f"p{slide[i] % 3}", 0) for i in range(n)]
    P = rng.dirichlet([1, 1], n)
    perm = rng.permutation(6)
    rows2 = [(t, f"s{perm[int(s[1:])]}", p, y) for t, s, p, y in rows]
    a = aggregate(P, manifest(rows))
    b = aggregate(P, manifest(rows2))
    for ra, rb in zip(a, b):
        assert ra.patient_id == rb.patient_id
        assert np.allclose(ra.probs, rb.probs, rtol=0, atol=1e-12)
        assert np.isclose(ra.probs.sum(), 1.0)


# --- breakdown, DA error, fairness ------------------------------------------


def test_breakdown_full_and_correct():
    full = [record(f"p{i}", i % 2, (0, 1)) for i in range(6)]
    assert breakdown(full) == {"single-correct": 0, "single-incorrect": 0, "abstention": 6, "empty": 0}
    right = [record(f"p{i}", i % 2, (i % 2,)) for i in range(6)]
    assert breakdown(right)["single-correct"] == 6


def test_breakdown_mixed_five():
    sets = [(0,), (1,), (0, 1), (), (1,)]
    labels = [0, 0, 1, 1, 1]
    recs = [record(f"p{i}", y, s) for i, (s, y) in enumerate(zip(sets, labels))]
    assert breakdown(recs) == breakdown_by_hand(sets, labels)
    assert breakdown(recs) == {"single-correct": 2, "single-incorrect": 1, "abstention": 1, "empty": 1}
    assert [r.breakdown for r in recs] == ["single-correct", "single-incorrect", "abstention", "empty",
                                          "single-correct"]


def test_breakdown_needs_sets():
    with pytest.raises(ValueError):
        breakdown([record("p", 0)])


def test_da_error_examples():
    recs = [record(f"c{i}", 0, (0,)) for i in range(9)] + [record("w", 0, (1,))]
    assert da_error_rate(recs) == 0.1
    assert da_error_rate(recs[:9]) == 0.0
    assert da_error_rate([record("a", 0, (0, 1)), record("b", 1, ())]) is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([(), (0,), (1,), (0, 1)]), st.integers(0, 1)), min_size=1))
def test_breakdown_partitions_cohort(items):
    recs = [record(f"p{i}", y, s) for i, (s, y) in enumerate(items)]
    b = breakdown(recs)
    assert sum(b.values()) == len(items)
    assert b == breakdown_by_hand([s for s, _ in items], [y for _, y in items])
    d = da_error_rate(recs)
    assert d is None or 0.0 <= d <= 1.0


def _cohort(accs, sizes, field="sex"):
    recs = []
    for g, (acc, n) in enumerate(zip(accs, sizes)):
        n_right = round(acc * n)
        for i in range(n):
            y = 0
            probs = (0.8, 0.2) if i < n_right else (0.2, 0.8)
            kw = {"sex": f"g{g}"} if field == "sex" else {"race": f"g{g}"}
            recs.append(record(f"g{g}-{i}", y, (0,) if i % 2 else (0, 1), probs, **kw))
    return recs


def test_fairness_examples():
    assert fairness_gap(_cohort([0.9, 0.9], [20, 40])) == 0.0
    assert fairness_gap(_cohort([0.9, 0.8], [20, 20])) == pytest.approx(0.1)
    assert fairness_gap(_cohort([0.9, 0.85, 0.7], [20, 20, 20], "race"), group_field="race-group") == \
        pytest.approx(0.2)


def test_fairness_matches_oracle_exactly():
    recs = _cohort([0.9, 0.85, 0.7, 0.5], [20, 40, 20, 5], "race")
    values = [float(r.correct) for r in recs]
    groups = [r.race_group for r in recs]
    assert fairness_gap(recs, "accuracy", "race-group") == fairness_gap_by_hand(values, groups)
    sizes = [float(len(r.prediction_set)) for r in recs]
    assert fairness_gap(recs, "avg-set-size", "race-group") == fairness_gap_by_hand(sizes, groups)


def test_fairness_small_groups_merge_into_others():
    # groups of 10 and 5 fold into one 'Others' group of accuracy 0.6
    recs = _cohort([0.9, 0.7, 0.4], [30, 10, 5])
    assert fairness_gap(recs) == pytest.approx(0.9 - 0.6)


def test_fairness_single_group_is_error():
    with pytest.raises(ValueError):
        fairness_gap(_cohort([0.9], [30]))
    with pytest.raises(ValueError):
        fairness_gap(_cohort([0.9, 0.8], [10, 5]))
    with pytest.raises(ValueError):
        fairness_gap(_cohort([0.9, 0.8], [20, 20]), metric="f1")
