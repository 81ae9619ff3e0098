"""Coverage versus OOD:In-D ratio with no gate, a TPR-targeted gate, and gate + CRC.

    python scripts/ood_experiment.py --seeds 10 --alpha 0.05 --out coverage_vs_ratio.csv
"""

import argparse
import csv

from truecam.data import ScenarioConfig
from truecam.pipeline import OodConfig, ood_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--resplits", type=int, default=100)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--offset", type=float, default=6.0, help="OOD shift in units of the blob spread")
    ap.add_argument("--target-tpr", type=float, default=1.0)
    ap.add_argument("--ratios", default="0.25,0.5,1,2")
    ap.add_argument("--score", choices=("uncertainty", "probability"), default="uncertainty")
    ap.add_argument("--out")
    args = ap.parse_args()

    cfg = OodConfig(ratios=tuple(float(r) for r in args.ratios.split(",")), alpha=args.alpha,
                    target_tpr=args.target_tpr, score_kind=args.score, n_resplits=args.resplits)
    res = ood_experiment(ScenarioConfig(ood_offset=args.offset), cfg, seeds=range(args.seeds))
    print(f"gate AUROC on tuning streams: {res.auroc.mean():.4f}")
    header = ("ratio", "ungated", "gated", "crc", "rho_hat", "ood_retained")
    print("  ".join(f"{h:>12}" for h in header))
    rows = []
    for i, r in enumerate(res.ratios):
        row = (r, res.ungated[:, i].mean(), res.gated[:, i].mean(), res.crc[:, i].mean(),
               res.rho_hat[:, i].mean(), res.retained_ood[:, i].mean())
        rows.append(row)
        print("  ".join(f"{v:>12.4f}" for v in row))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


if __name__ == "__main__":
    main()
