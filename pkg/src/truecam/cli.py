"""``truecam`` command line: generate data, train, filter, calibrate, evaluate, simulate OOD.

Data directories hold ``embeddings.emb`` (EMB1), ``manifest.csv`` and
``scenario.cfg``. Every JSON output carries ``"schema": 1``. The thread
count for the linear-algebra backend comes from ``TRUECAM_THREADS`` only.
"""

from __future__ import annotations

import os

_threads = os.environ.get("TRUECAM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import traceback  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

SCHEMA = 1
PATIENT_COLUMNS = ("patient_id", "set", "score_ood", "breakdown", "group_sex", "group_race")
RATIO_COLUMNS = ("ratio", "n_ood", "ungated_coverage", "gated_coverage", "crc_coverage", "rho_hat", "ood_retained")

EPILOG = f"""\
outputs:
  gen          DIR/embeddings.emb, DIR/manifest.csv, DIR/scenario.cfg, DIR/gen.json
  train        checkpoint file (SNGP binary format)
  eat          DIR/filter.json, DIR/retention.csv (slide_id,n_tiles,n_retained)
  calibrate    calibrator JSON: {{schema, n, scores, calibrators: [{{alpha, rank, q_hat}}]}}
  evaluate     DIR/report.json, DIR/patients_alpha<alpha>.csv
               CSV columns: {",".join(PATIENT_COLUMNS)}
               (set is '|'-joined labels, empty for an empty set)
  simulate-ood DIR/coverage_vs_ratio.csv, DIR/simulate_ood.json
               CSV columns: {",".join(RATIO_COLUMNS)}
environment:
  TRUECAM_THREADS  thread count for the BLAS backend
"""


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps({"schema": SCHEMA, **obj}, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _digest(*paths) -> str:
    """SHA-256 over input file contents: provenance that does not depend on where files live."""
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _read_json(path) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("schema") != SCHEMA:
        raise CliError(f"{path}: unsupported schema {obj.get('schema')!r}")
    return obj


def _load_data(path):
    from truecam.data import read_embeddings, read_manifest

    d = Path(path)
    if not d.is_dir():
        raise CliError(f"data directory {d} does not exist")
    X = read_embeddings(d / "embeddings.emb")
    m = read_manifest(d / "manifest.csv")
    if X.shape[0] != len(m):
        raise CliError(f"{d}: {X.shape[0]} embedding rows but {len(m)} manifest rows")
    return X, m


def _alphas(values) -> list[float]:
    from truecam.pipeline import ALPHAS

    alphas = list(values) if values else list(ALPHAS)
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise CliError(f"alpha must lie in (0, 1), got {a}")
    return alphas


def _ratios(text: str) -> list[float]:
    try:
        ratios = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise CliError(f"bad ratio list {text!r}") from e
    if not ratios or any(r < 0 for r in ratios):
        raise CliError("ratios must be non-negative")
    return ratios


def _filter_to_json(f) -> dict:
    return {
        "mode": f.mode,
        "centers": None if f.centers is None else f.centers.tolist(),
        "ambiguous_cluster_id": f.ambiguous_cluster_id,
        "threshold": f.threshold,
        "target_elimination_rate": f.target_elimination_rate,
        "training_elimination_rate": f.training_elimination_rate,
        "dominance": list(f.dominance),
    }


def _filter_from_json(path):
    from truecam.trust import EatFilter

    obj = _read_json(path)
    centers = None if obj["centers"] is None else np.array(obj["centers"], dtype=np.float64)
    return EatFilter(obj["mode"], centers, obj["ambiguous_cluster_id"], obj["threshold"],
                     obj["target_elimination_rate"], tuple(obj["dominance"]), obj["training_elimination_rate"])


def _keep_mask(filt, X, manifest, probs):
    from truecam.trust import ambiguity_score, eat_keep_mask

    return eat_keep_mask(filt, np.asarray(manifest.slide_id), X, ambiguity_score(probs))


def _head_config(args):
    from truecam.pipeline import HeadConfig
    from truecam.sngp_head import TrainConfig

    return HeadConfig(rff_dim=args.rff_dim, train=TrainConfig(epochs=args.epochs, lr=args.lr))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> None:
    from truecam.data import (
        ScenarioConfig,
        gen_eat_scenario,
        gen_ind_scenario,
        gen_ood_scenario,
        read_scenario_config,
        write_embeddings,
        write_manifest,
        write_scenario_config,
    )

    cfg = read_scenario_config(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.scenario == "ind":
        s = gen_ind_scenario(cfg)
    elif args.scenario == "ood":
        s = gen_ood_scenario(cfg, args.ratio)
    else:
        s = gen_eat_scenario(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "embeddings.emb", s.embeddings)
    write_manifest(out / "manifest.csv", s.manifest)
    write_scenario_config(out / "scenario.cfg", cfg)
    pats = s.manifest.patients()
    n_ood = len({p for p, o in zip(s.manifest.patient_id, s.is_ood) if o})
    _write_json(out / "gen.json", {"scenario": args.scenario, "ratio": args.ratio, "n_tiles": len(s.manifest),
                                   "n_slides": len(s.manifest.slides()), "n_patients": len(pats),
                                   "n_ood_patients": n_ood})


def cmd_train(args) -> None:
    from truecam.pipeline import train_head
    from truecam.sngp_head import save_head

    X, m = _load_data(args.data)
    rows = ~m.is_ood
    if args.filter:
        from truecam.trust import eat_keep_mask

        filt = _filter_from_json(args.filter)
        if filt.mode != "cluster":
            raise CliError("training-time filtering needs a cluster-mode filter")
        rows &= eat_keep_mask(filt, np.asarray(m.slide_id), X)
    if not rows.any():
        raise CliError("no labelled tiles to train on")
    head = train_head(X[rows], m.label[rows], _head_config(args), args.seed or 0)
    save_head(head, args.out)


def cmd_eat(args) -> None:
    from truecam.pipeline import score_tiles
    from truecam.sngp_head import load_head
    from truecam.trust import ambiguity_score, fit_eat_cluster, fit_eat_threshold, fit_logistic_proxy
    from truecam.numerics import make_rng

    X, m = _load_data(args.data)
    rows = ~m.is_ood
    X, labels = X[rows], m.label[rows]
    slides = np.asarray(m.slide_id)[rows]
    if args.model == "logistic":
        probs = fit_logistic_proxy(X, labels).predict_proba(X)
    else:
        if not args.checkpoint:
            raise CliError("--model head needs a checkpoint")
        probs, _ = score_tiles(load_head(args.checkpoint), X)
    if args.mode == "cluster":
        filt = fit_eat_cluster(X, probs, labels, k=args.k, rng=make_rng(args.seed or 0))
    else:
        filt = fit_eat_threshold(ambiguity_score(probs), args.rate)
    from truecam.trust import eat_keep_mask

    keep = eat_keep_mask(filt, slides, X, ambiguity_score(probs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "filter.json", {**_filter_to_json(filt), "ambiguity_model": args.model,
                                      "retained_fraction": float(keep.mean())})
    uniq, inv = np.unique(slides, return_inverse=True)
    with open(out / "retention.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("slide_id", "n_tiles", "n_retained"))
        for j, s in enumerate(uniq):
            w.writerow((s, int((inv == j).sum()), int(keep[inv == j].sum())))


def _scored_table(args, X, m, head):
    from truecam.pipeline import patient_table, score_tiles

    P, U = score_tiles(head, X)
    keep = _keep_mask(_filter_from_json(args.filter), X, m, P) if getattr(args, "filter", None) else None
    return patient_table(m, P, U, keep=keep, delta=args.delta)


def cmd_calibrate(args) -> None:
    from truecam.conformal import nonconformity_scores, quantile_rank, read_calibration_csv
    from truecam.pipeline import q_hat_from_scores
    from truecam.sngp_head import load_head

    if args.probs:
        _, P, y = read_calibration_csv(args.probs)
        source = {"probs_sha256": _digest(args.probs)}
    else:
        if not (args.data and args.checkpoint):
            raise CliError("calibrate needs DATA and CHECKPOINT, or --probs")
        X, m = _load_data(args.data)
        table = _scored_table(args, X, m, load_head(args.checkpoint))
        keep = table.labels >= 0
        P, y = table.probs[keep], table.labels[keep]
        d = Path(args.data)
        source = {"data_sha256": _digest(d / "embeddings.emb", d / "manifest.csv"),
                  "checkpoint_sha256": _digest(args.checkpoint)}
    if len(y) == 0:
        raise CliError("empty calibration set")
    scores = nonconformity_scores(P, y)
    cals = [{"alpha": a, "rank": quantile_rank(len(scores), a), "q_hat": q_hat_from_scores(scores, a)}
            for a in _alphas(args.alpha)]
    _write_json(Path(args.out), {"n": int(len(scores)), "scores": np.sort(scores).tolist(),
                                 "calibrators": cals, **source})


def _set_text(pred_set) -> str:
    return "|".join(str(k) for k in pred_set)


def cmd_evaluate(args) -> None:
    from truecam.pipeline import evaluate_with_threshold
    from truecam.sngp_head import load_head

    X, m = _load_data(args.data)
    table = _scored_table(args, X, m, load_head(args.checkpoint))
    cal = _read_json(args.calibrator)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for c in cal["calibrators"]:
        row, recs = evaluate_with_threshold(table, c["alpha"], c["q_hat"])
        rows.append(row)
        with open(out / f"patients_alpha{c['alpha']:g}.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(PATIENT_COLUMNS)
            for r in recs:
                w.writerow((r.patient_id, _set_text(r.prediction_set), repr(float(r.score_ood)), r.breakdown,
                            r.sex, r.race_group))
    _write_json(out / "report.json", {"n_patients": len(table.ids), "score_ood": "uncertainty",
                                      "delta": args.delta, "eat": bool(args.filter), "alphas": rows})


def cmd_simulate_ood(args) -> None:
    from truecam.pipeline import OodConfig, ood_sweep, patient_table, score_tiles
    from truecam.sngp_head import load_head
    from truecam.numerics import make_rng

    X, m = _load_data(args.data)
    P, U = score_tiles(load_head(args.checkpoint), X)
    table = patient_table(m, P, U, delta=args.delta)
    seed = args.seed or 0
    ind = [i for i, r in enumerate(table.records) if r.label >= 0]
    ood = [i for i, r in enumerate(table.records) if r.label < 0]
    ind = np.array(ind)[make_rng([seed, 0]).permutation(len(ind))]
    ood = np.array(ood, dtype=np.int64)[make_rng([seed, 1]).permutation(len(ood))]
    if len(ind) <= args.n_tune or len(ood) <= args.n_tune_ood:
        raise CliError("not enough In-D / OOD patients for the tuning stream")
    alphas = _alphas(args.alpha)
    if len(alphas) != 1:
        raise CliError("simulate-ood takes a single --alpha")
    cfg = OodConfig(ratios=tuple(_ratios(args.ratios)), alpha=alphas[0], target_tpr=args.target_tpr,
                    delta=args.delta, n_resplits=args.resplits)
    res = ood_sweep(table, ind[: args.n_tune], ood[: args.n_tune_ood], ind[args.n_tune :],
                    ood[args.n_tune_ood :], cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "coverage_vs_ratio.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RATIO_COLUMNS)
        for i, ratio in enumerate(res["ratio"]):
            w.writerow((ratio, res["n_ood"][i], *(repr(res[k][i]) for k in
                        ("ungated", "gated", "crc", "rho_hat", "retained_ood"))))
    _write_json(out / "simulate_ood.json", {"alpha": cfg.alpha, "target_tpr": cfg.target_tpr,
                                            "threshold": res["threshold"], "tuning_auroc": res["auroc"],
                                            "resplits": cfg.n_resplits, "rows": [
                                                {k: res[k][i] for k in ("ratio", "n_ood", "ungated", "gated", "crc",
                                                                        "rho_hat", "retained_ood")}
                                                for i in range(len(res["ratio"]))]})


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="truecam", description=__doc__.splitlines()[0], epilog=EPILOG,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True)
        return sp

    def head_opts(sp):
        sp.add_argument("--epochs", type=int, default=4)
        sp.add_argument("--lr", type=float, default=3e-3)
        sp.add_argument("--rff-dim", type=int, default=1024)

    sp = add("gen", cmd_gen, "generate a synthetic cohort")
    sp.add_argument("--scenario", choices=("ind", "ood", "eat"), default="ind")
    sp.add_argument("--ratio", type=float, default=0.0, help="OOD:In-D patient ratio (ood scenario)")
    sp.add_argument("--config", help="flat key = value scenario config file")

    sp = add("train", cmd_train, "fit an SNGP head on the labelled tiles of DATA")
    sp.add_argument("data")
    sp.add_argument("--filter", help="cluster-mode EAT filter applied to the training tiles")
    head_opts(sp)

    sp = add("eat", cmd_eat, "fit an EAT filter and report per-slide retention")
    sp.add_argument("data")
    sp.add_argument("checkpoint", nargs="?")
    sp.add_argument("--mode", choices=("cluster", "threshold"), default="cluster")
    sp.add_argument("--model", choices=("head", "logistic"), default="head", help="ambiguity model")
    sp.add_argument("--rate", type=float, default=0.6, help="target elimination rate (threshold mode)")
    sp.add_argument("--k", type=int, default=3)

    sp = add("calibrate", cmd_calibrate, "compute conformal thresholds for each alpha")
    sp.add_argument("data", nargs="?")
    sp.add_argument("checkpoint", nargs="?")
    sp.add_argument("--probs", help="calibration CSV (item_id,prob_0..,label) instead of DATA/CHECKPOINT")
    sp.add_argument("--alpha", type=float, action="append")
    sp.add_argument("--filter")
    sp.add_argument("--delta", type=int, default=200)

    sp = add("evaluate", cmd_evaluate, "prediction sets and trust report for a cohort")
    sp.add_argument("data")
    sp.add_argument("checkpoint")
    sp.add_argument("calibrator")
    sp.add_argument("--filter")
    sp.add_argument("--delta", type=int, default=200)

    sp = add("simulate-ood", cmd_simulate_ood, "coverage versus OOD ratio with gating and CRC")
    sp.add_argument("data", help="cohort with In-D and OOD (label -1) patients")
    sp.add_argument("checkpoint")
    sp.add_argument("--ratios", default="0.25,0.5,1,2")
    sp.add_argument("--alpha", type=float, action="append")
    sp.add_argument("--target-tpr", type=float, default=1.0)
    sp.add_argument("--delta", type=int, default=200)
    sp.add_argument("--resplits", type=int, default=100)
    sp.add_argument("--n-tune", type=int, default=50)
    sp.add_argument("--n-tune-ood", type=int, default=50)
    return p


def _failing_module(exc: BaseException) -> str:
    frames = traceback.extract_tb(exc.__traceback__)
    for fr in reversed(frames):
        path = Path(fr.filename)
        if "truecam" in path.parts:
            parts = path.with_suffix("").parts
            mod = ".".join(parts[parts.index("truecam") :])
            return mod.removesuffix(".__init__")
    return "truecam.cli"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "alpha", None) is not None and not isinstance(args.alpha, list):
        args.alpha = [args.alpha]
    try:
        args.fn(args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"truecam: error [{_failing_module(e)}]: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
