"""Patient accuracy with and without cluster-mode elimination of ambiguous tiles.

    python scripts/eat_experiment.py --seeds 20
"""

import argparse

from truecam.data import ScenarioConfig
from truecam.pipeline import eat_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--patients", type=int, default=200)
    ap.add_argument("--mix", type=float, default=0.5, help="fraction of tiles drawn from the mixed blob")
    ap.add_argument("--k", type=int, default=3)
    args = ap.parse_args()

    res = eat_experiment(ScenarioConfig(n_patients=args.patients, eat_mix=args.mix), seeds=range(args.seeds),
                         k=args.k)
    print("seed  plain   EAT     eliminated  mixed-blob")
    for s in range(args.seeds):
        print(f"{s:<5} {res.accuracy_plain[s]:.4f}  {res.accuracy_eat[s]:.4f}  {res.elimination_rate[s]:.3f}"
              f"       {'yes' if res.mixed_blob_found[s] else 'no'}")
    print(f"mean  {res.accuracy_plain.mean():.4f}  {res.accuracy_eat.mean():.4f}  "
          f"{res.elimination_rate.mean():.3f}       {int(res.mixed_blob_found.sum())}/{args.seeds}")


if __name__ == "__main__":
    main()
