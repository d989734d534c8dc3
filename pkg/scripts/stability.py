"""Final ensemble mIoU of each method across the learning-rate grid; mean and std per method.

    python3 scripts/stability.py [--methods tent,xmuda,mmtta_hard,mmtta_soft]
"""

from _common import parser, setup
from mmtta import harness as H
from mmtta.methods import AdaptationConfig


def main():
    ap = parser(__doc__, "runs/stability.csv")
    ap.add_argument("--methods", default="tent,tent_ens,xmuda,xmuda_pl,mmtta_hard,mmtta_soft")
    args = ap.parse_args()
    model, target, _ = setup(args)
    report = H.sweep_lr(model, target, AdaptationConfig(), args.methods.split(","))
    rows = []
    for method, r in report.items():
        cells = " ".join(f"{100 * s:5.1f}" for s in r["scores"])
        print(f"{method:12s} {cells}   mean {100 * r['mean']:5.1f} std {100 * r['std']:5.2f}")
        rows += [(method, lr2, lr3, s) for (lr2, lr3), s in zip(H.LR_PAIRS, r["scores"])]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    H.write_csv(args.out, ("method", "lr2d", "lr3d", "miou_ens"), rows)


if __name__ == "__main__":
    main()
