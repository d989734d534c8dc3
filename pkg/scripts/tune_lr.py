"""Per-method learning-rate selection on the pinned fixture (adaptation seed 0).

Every method is run once per pair in harness.TUNING_PAIRS; the pair with the
highest ensemble mIoU is reported. The result is the table stored as
harness.TUNED_LR.

    python3 scripts/tune_lr.py [--out runs/tune_lr.csv]
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from mmtta import data as D
from mmtta import harness as H
from mmtta.methods import METHODS, AdaptationConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/tune_lr.csv"))
    ap.add_argument("--preset", default="sensor-swap")
    args = ap.parse_args()
    spec = D.preset(args.preset)
    model = H.pretrain(D.generate(spec, "source"), spec.K, H.PretrainConfig())
    target = D.generate(spec, "target")
    rows, best = [], {}
    for method in (m for m in METHODS if m != "pseudo_ablation"):
        scores = []
        for lr2, lr3 in H.TUNING_PAIRS:
            cfg = replace(AdaptationConfig(), method=method, lr2d=lr2, lr3d=lr3)
            with np.errstate(over="ignore", invalid="ignore"):
                scores.append(H.adapt(model, target, cfg).metrics.miou["ens"])
            rows.append((method, lr2, lr3, scores[-1]))
        best[method] = H.TUNING_PAIRS[int(np.argmax(scores))]
        print(f"{method:18s} " + " ".join(f"{s:.3f}" for s in scores) + f"  best={best[method]}", flush=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    H.write_csv(args.out, ("method", "lr2d", "lr3d", "miou_ens"), rows)
    mismatched = {m: p for m, p in best.items() if H.TUNED_LR.get(m) != p}
    print("TUNED_LR is up to date" if not mismatched else f"TUNED_LR differs for: {mismatched}")


if __name__ == "__main__":
    main()
