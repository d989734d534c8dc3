"""Component ablation, theta sweep and momentum sweep on the pinned fixture.

    python3 scripts/ablation.py [--grids components,theta,lambda]
"""

from _common import parser, setup
from mmtta import harness as H
from mmtta.methods import AdaptationConfig


def main():
    ap = parser(__doc__, "runs/ablation.csv")
    ap.add_argument("--grids", default="components,theta,lambda")
    args = ap.parse_args()
    model, target, _ = setup(args)
    rows = H.sweep_ablation(model, target, AdaptationConfig(), tables=tuple(args.grids.split(",")))
    for grid, name, theta, lam, m2, m3, ens in rows:
        print(f"{grid:10s} {name:20s} theta={theta:<4} lambda={lam:<5} 2d {100 * m2:5.1f} 3d {100 * m3:5.1f} ens {100 * ens:5.1f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    H.write_csv(args.out, H.ABLATION_COLUMNS, rows)


if __name__ == "__main__":
    main()
