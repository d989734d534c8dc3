"""Pseudo-label accuracy over the epoch for fast-only, Intra-PG and Intra-PG + Inter-PR labels.

    python3 scripts/pseudo_curve.py [--checkpoints 10]
"""

from _common import parser, setup
from mmtta import harness as H
from mmtta.methods import AdaptationConfig


def main():
    ap = parser(__doc__, "runs/pseudo_curve.csv")
    ap.add_argument("--checkpoints", type=int, default=10)
    args = ap.parse_args()
    model, target, _ = setup(args)
    curves = H.pseudo_accuracy_curve(model, target, AdaptationConfig(), args.checkpoints)
    for name, pts in curves.items():
        print(f"{name:18s} " + " ".join(f"{100 * a:5.1f}" for _, a in pts))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    H.write_csv(args.out, ("variant", "iteration", "accuracy"), H.curve_rows(curves))


if __name__ == "__main__":
    main()
