import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pairwise_auroc
from truecam.data import (
    FormatError,
    Manifest,
    ScenarioConfig,
    dumps_embeddings,
    gen_eat_scenario,
    gen_ind_scenario,
    gen_ood_scenario,
    loads_embeddings,
    make_split_plan,
    partition_sizes,
    read_embeddings,
    read_manifest,
    read_scenario_config,
    resplit_indices,
    write_embeddings,
    write_manifest,
    write_scenario_config,
)
from truecam.numerics import make_rng

HEADER = "tile_id,slide_id,patient_id,label,sex,race_group\n"


# --- embedding files -------------------------------------------------------


def test_embeddings_roundtrip_bitwise(tmp_path):
    X = make_rng(3).standard_normal((10, 4)).astype(np.float32)
    write_embeddings(tmp_path / "x.emb", X)
    back = read_embeddings(tmp_path / "x.emb")
    assert back.dtype == np.float64
    assert back.astype(np.float32).tobytes() == X.tobytes()


def test_embeddings_header_layout():
    raw = dumps_embeddings(np.ones((2, 3), dtype=np.float32))
    assert raw[:4] == b"EMB1"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[6:10], "little") == 2
    assert int.from_bytes(raw[10:14], "little") == 3
    assert len(raw) == 14 + 4 * 6


def test_embeddings_truncated_rejected():
    raw = dumps_embeddings(np.ones((3, 3)))
    with pytest.raises(FormatError):
        loads_embeddings(raw[:-1])
    with pytest.raises(FormatError):
        loads_embeddings(raw + b"\0")
    with pytest.raises(FormatError):
        loads_embeddings(raw[:6])


def test_embeddings_bad_magic_and_version():
    raw = bytearray(dumps_embeddings(np.ones((1, 1))))
    bad = bytes(b"EMB2" + raw[4:])
    with pytest.raises(FormatError):
        loads_embeddings(bad)
    raw[4] = 2
    with pytest.raises(FormatError):
        loads_embeddings(bytes(raw))


def test_embeddings_empty_matrix():
    X = loads_embeddings(dumps_embeddings(np.zeros((0, 7))))
    assert X.shape == (0, 7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_embeddings_roundtrip_property(n, d, seed):
    X = make_rng(seed).standard_normal((n, d)).astype(np.float32)
    assert loads_embeddings(dumps_embeddings(X)).astype(np.float32).tobytes() == X.tobytes()


# --- manifests -------------------------------------------------------------


def test_manifest_minimal(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + "t0,s0,p0,1,female,white\n", encoding="utf-8")
    m = read_manifest(p)
    assert m.tile_id == ("t0",) and m.label.tolist() == [1]
    assert m.patients() == ["p0"]


def test_manifest_conflicting_slide(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + "t0,s0,p0,1,f,w\nt1,s0,p1,1,f,w\n", encoding="utf-8")
    with pytest.raises(ValueError, match="s0"):
        read_manifest(p)


def test_manifest_duplicate_tile(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + "t0,s0,p0,1,f,w\nt0,s1,p0,1,f,w\n", encoding="utf-8")
    with pytest.raises(ValueError, match="t0"):
        read_manifest(p)


def test_manifest_header_required(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("t0,s0,p0,1,f,w\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_manifest(p)


def test_manifest_bad_label(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + "t0,s0,p0,2,f,w\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_manifest(p)


def test_manifest_roundtrip_preserves_counts(tmp_path):
    s = gen_ood_scenario(ScenarioConfig(n_patients=300, seed=4), 0.2)
    write_manifest(tmp_path / "m.csv", s.manifest)
    m = read_manifest(tmp_path / "m.csv")
    assert m == s.manifest
    assert len(m.patients()) == 360
    in_d = [p for p in m.patients() if p.startswith("P")]
    slides = {sl for sl, p in zip(m.slide_id, m.patient_id) if p.startswith("P")}
    # 1 + Poisson(2.1) slides per patient: mean 3.1, sd ~1.45 -> se ~0.084 over 300 patients
    assert abs(len(slides) / len(in_d) - 3.1) < 0.35


# --- generators ------------------------------------------------------------


def _patient_means(s):
    m = s.manifest
    ids = m.patients()
    idx = {p: i for i, p in enumerate(ids)}
    inv = np.array([idx[p] for p in m.patient_id])
    sums = np.zeros((len(ids), s.embeddings.shape[1]))
    np.add.at(sums, inv, s.embeddings)
    means = sums / np.bincount(inv)[:, None]
    labels = np.array([m.label[m.patient_id.index(p)] for p in ids])
    return means, labels


def test_gen_ind_deterministic_and_seed_sensitive():
    cfg = ScenarioConfig(n_patients=30, seed=11)
    a, b = gen_ind_scenario(cfg), gen_ind_scenario(cfg)
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert a.manifest.tile_id == b.manifest.tile_id
    c = gen_ind_scenario(cfg.replace(seed=12))
    assert a.embeddings.shape != c.embeddings.shape or not np.array_equal(a.embeddings, c.embeddings)


def test_gen_ind_zero_separation_has_no_signal():
    s = gen_ind_scenario(ScenarioConfig(n_patients=400, separation=0.0, seed=2))
    means, y = _patient_means(s)
    # the best single-axis score is axis 0 by construction; with no separation it is noise
    auc = pairwise_auroc(means[:, 0].tolist(), y.tolist())
    assert abs(auc - 0.5) < 0.08


def test_gen_ind_wide_separation_is_linearly_separable():
    s = gen_ind_scenario(ScenarioConfig(n_patients=100, separation=10.0, seed=5))
    y = s.manifest.label
    # least-squares linear classifier on tiles
    A = np.c_[s.embeddings, np.ones(len(y))]
    w, *_ = np.linalg.lstsq(A, 2.0 * y - 1.0, rcond=None)
    assert ((A @ w > 0) == (y == 1)).mean() > 0.99


def test_gen_ind_float32_exact():
    s = gen_ind_scenario(ScenarioConfig(n_patients=5))
    assert np.array_equal(s.embeddings, s.embeddings.astype(np.float32).astype(np.float64))


def test_gen_ood_ratio_counts():
    cfg = ScenarioConfig(n_patients=51, seed=1)
    s0 = gen_ood_scenario(cfg, 0.0)
    assert not s0.is_ood.any()
    s1 = gen_ood_scenario(cfg, 1.0)
    pats = s1.manifest.patients()
    n_ood = sum(p.startswith("O") for p in pats)
    assert abs(n_ood - (len(pats) - n_ood)) <= 1
    assert set(s1.manifest.label[s1.is_ood]) == {-1}


def test_gen_ood_nested_across_ratios():
    cfg = ScenarioConfig(n_patients=40, seed=9)
    small, big = gen_ood_scenario(cfg, 0.5), gen_ood_scenario(cfg, 1.0)
    n = len(small.manifest)
    assert big.manifest.tile_id[:n] == small.manifest.tile_id
    assert np.array_equal(big.embeddings[:n], small.embeddings)


def test_gen_ood_zero_offset_indistinguishable():
    s = gen_ood_scenario(ScenarioConfig(n_patients=300, ood_offset=0.0, seed=3), 1.0)
    means, _ = _patient_means(s)
    ood = np.array([p.startswith("O") for p in s.manifest.patients()])
    score = np.linalg.norm(means, axis=1)
    assert abs(pairwise_auroc(score.tolist(), ood.astype(int).tolist()) - 0.5) < 0.08


def test_gen_eat_purity_one_is_pure():
    s = gen_eat_scenario(ScenarioConfig(n_patients=60, purity=1.0, seed=2))
    dom = s.blob < 2
    assert np.array_equal(s.blob[dom], s.manifest.label[dom])


def test_gen_eat_no_mix_no_ambiguous_blob():
    s = gen_eat_scenario(ScenarioConfig(n_patients=30, eat_mix=0.0))
    assert not (s.blob == 2).any()


def test_gen_eat_mixed_blob_balanced():
    s = gen_eat_scenario(ScenarioConfig(n_patients=400, seed=6))
    mixed = s.blob == 2
    assert abs(mixed.mean() - 0.5) < 0.02
    assert abs(s.manifest.label[mixed].mean() - 0.5) < 0.06
    dom = ~mixed
    assert abs((s.blob[dom] == s.manifest.label[dom]).mean() - 0.95) < 0.01


def test_scenario_config_file(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("# cohort\nn_patients = 12\nseparation = 2.5  # sigma units\n", encoding="utf-8")
    cfg = read_scenario_config(p)
    assert cfg.n_patients == 12 and cfg.separation == 2.5 and cfg.seed == 0
    cfg2 = cfg.replace(seed=7, purity=1.0)
    write_scenario_config(tmp_path / "t.cfg", cfg2)
    assert read_scenario_config(tmp_path / "t.cfg") == cfg2


def test_scenario_config_unknown_key(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("n_patient = 12\n", encoding="utf-8")
    with pytest.raises(ValueError, match="n_patient"):
        read_scenario_config(p)


@pytest.mark.parametrize("kw", [{"n_patients": 0}, {"spread": 0.0}, {"purity": 0.3}, {"eat_mix": 1.0}])
def test_scenario_config_validation(kw):
    with pytest.raises(ValueError):
        ScenarioConfig(**kw)


# --- split plans -----------------------------------------------------------


def test_split_ratios_must_sum_to_one():
    with pytest.raises(ValueError):
        make_split_plan([f"p{i}" for i in range(100)], ratios=(0.6, 0.2, 0.1), cal_size=5)


def test_split_sizes_65_15_20():
    assert partition_sizes(100, (0.65, 0.15, 0.20)) == (65, 15, 20)
    plan = make_split_plan([f"p{i}" for i in range(100)], n_models=2, n_resplits=3, cal_size=10)
    for m in plan.models:
        assert (len(m.train), len(m.val), len(m.caltest)) == (65, 15, 20)


def test_split_cal_size_too_big():
    with pytest.raises(ValueError):
        make_split_plan([f"p{i}" for i in range(100)], cal_size=21)


def test_split_plan_deterministic():
    ids = [f"p{i}" for i in range(50)]
    a = make_split_plan(ids, n_models=3, n_resplits=4, cal_size=5, seed=1)
    assert a == make_split_plan(ids, n_models=3, n_resplits=4, cal_size=5, seed=1)
    assert a != make_split_plan(ids, n_models=3, n_resplits=4, cal_size=5, seed=2)


def test_split_plan_excludes_ood_patients():
    s = gen_ood_scenario(ScenarioConfig(n_patients=40), 0.5)
    plan = make_split_plan(s.manifest, n_models=1, n_resplits=1, cal_size=4)
    m = plan.models[0]
    everyone = m.train + m.val + m.caltest
    assert len(everyone) == 40 and not any(p.startswith("O") for p in everyone)


@settings(max_examples=25, deadline=None)
@given(st.integers(20, 120), st.integers(0, 1000))
def test_split_no_leakage(n, seed):
    ids = [f"p{i}" for i in range(n)]
    _, _, n_ct = partition_sizes(n, (0.65, 0.15, 0.20))
    plan = make_split_plan(ids, n_models=2, n_resplits=5, cal_size=max(1, n_ct // 2), seed=seed)
    for m in plan.models:
        parts = [set(m.train), set(m.val), set(m.caltest)]
        assert sum(map(len, parts)) == n and set().union(*parts) == set(ids)
        for cal, test in m.resplits:
            assert not set(cal) & set(test)
            assert set(cal) | set(test) == parts[2]


def test_resplit_indices_are_permutations():
    idx = resplit_indices(10, 4, 3, seed=[0, 1])
    assert idx.shape == (3, 10)
    for row in idx:
        assert sorted(row) == list(range(10))
