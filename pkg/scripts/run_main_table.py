"""Ensemble/2D/3D mIoU of every method over five adaptation seeds, each at its tuned learning rates.

    python3 scripts/run_main_table.py [--seeds 5] [--out runs/main_table.csv]
"""

import numpy as np

from _common import parser, setup
from mmtta import harness as H
from mmtta.methods import METHODS, AdaptationConfig


def main():
    ap = parser(__doc__, "runs/main_table.csv")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    model, target, _ = setup(args)
    rows = []
    src = H.evaluate(model, target).miou
    rows += [("source_only", s, src["2d"], src["3d"], src["ens"]) for s in range(args.seeds)]
    for method in (m for m in METHODS if m != "pseudo_ablation"):
        for seed in range(args.seeds):
            m = H.adapt(model, target, H.tuned(AdaptationConfig(seed=seed), method)).metrics.miou
            rows.append((method, seed, m["2d"], m["3d"], m["ens"]))
        ens = [r[4] for r in rows if r[0] == method]
        print(f"{method:18s} ens mIoU {100 * np.mean(ens):5.1f} +- {100 * np.std(ens):.1f}", flush=True)
    print(f"{'source_only':18s} ens mIoU {100 * src['ens']:5.1f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    H.write_csv(args.out, ("method", "seed", "miou_2d", "miou_3d", "miou_ens"), rows)


if __name__ == "__main__":
    main()
