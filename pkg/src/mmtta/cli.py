"""Command-line entry point: ``mmtta <subcommand> --config FILE --out DIR --seed N``.

Every subcommand writes ``config.txt`` (the exact configuration used) into its
output directory, plus ``checkpoint.sha256`` whenever a model is involved.
Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import harness as H
from .methods import METHODS
from .model import MODALITIES, CheckpointError, ConfigError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("mmtta")

STABILITY_METHODS = ("tent", "tent_ens", "xmuda", "xmuda_pl", "mmtta_hard", "mmtta_soft", "oracle_tta")


def _frames(cfg: H.ExperimentConfig, split: str) -> list[D.MultiModalBatch]:
    path = {"source": cfg.source_path, "target": cfg.target_path}.get(split, "")
    if path:
        frames, _ = D.load(path)
        return frames
    return D.generate(cfg.scenario(), split)


def _num_classes(cfg: H.ExperimentConfig) -> int:
    for path in (cfg.source_path, cfg.target_path):
        if path:
            return D.load(path)[1]
    return cfg.scenario().K


def _model(cfg: H.ExperimentConfig):
    if cfg.checkpoint_path:
        return load_checkpoint(cfg.checkpoint_path)
    log.info("no checkpoint_path given; pretraining on the source split")
    return H.pretrain(_frames(cfg, "source"), _num_classes(cfg), cfg.pretrain)


def _check_finite(model) -> None:
    for m in MODALITIES:
        for bn in model[m, "fast"].bn_states + model[m, "slow"].bn_states:
            for a in (bn.mu, bn.sigma, bn.gamma.data, bn.beta.data):
                if not np.all(np.isfinite(a)):
                    raise H.NumericError(f"non-finite batch-norm state in the {m} branch after adaptation")


def _provenance(out: Path, cfg: H.ExperimentConfig, model=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(H.config_to_text(cfg))
    if model is not None:
        (out / "checkpoint.sha256").write_text(H.checkpoint_hash(model) + "\n")


def _metrics_rows(metrics: H.MetricsTable):
    return [(k, v) for k, v in metrics.row().items()]


def cmd_gen_data(cfg, out: Path) -> None:
    spec = cfg.scenario()
    _provenance(out, cfg)
    for split in ("source", "source-test", "target"):
        D.save(D.generate(spec, split), out / f"{split}.mmds", spec.K)


def cmd_pretrain(cfg, out: Path) -> None:
    model = H.pretrain(_frames(cfg, "source"), _num_classes(cfg), cfg.pretrain)
    _provenance(out, cfg, model)
    save_checkpoint(model, out / "checkpoint.bin")
    test = D.generate(cfg.scenario(), "source-test") if not cfg.source_path else _frames(cfg, "source")
    H.write_csv(out / "metrics.csv", ("metric", "value"), _metrics_rows(H.evaluate(model, test)))


def cmd_adapt(cfg, out: Path) -> None:
    model = _model(cfg)
    res = H.adapt(model, _frames(cfg, "target"), cfg.adapt, n_checkpoints=cfg.accuracy_checkpoints,
                  eval_batch_stats=cfg.eval_batch_stats)
    _check_finite(res.model)
    _provenance(out, cfg, model)
    save_checkpoint(res.model, out / "adapted.bin")
    (out / "steps.csv").write_text(H.steps_csv(res.steps))
    H.write_csv(out / "metrics.csv", ("metric", "value"), _metrics_rows(res.metrics))
    H.write_csv(out / "pseudo_accuracy.csv", ("iteration", "accuracy"), res.metrics.pseudo_accuracy)
    if not math.isfinite(res.metrics.miou["ens"]):
        raise H.NumericError("ensemble mIoU is not finite")


def cmd_eval(cfg, out: Path) -> None:
    model = _model(cfg)
    _provenance(out, cfg, model)
    H.write_csv(out / "metrics.csv", ("metric", "value"), _metrics_rows(H.evaluate(model, _frames(cfg, "target"))))


def cmd_sweep_lr(cfg, out: Path, methods=STABILITY_METHODS) -> None:
    model = _model(cfg)
    _provenance(out, cfg, model)
    report = H.sweep_lr(model, _frames(cfg, "target"), cfg.adapt, methods, eval_batch_stats=cfg.eval_batch_stats)
    rows = [(m, i + 1, lr2, lr3, s) for m, r in report.items()
            for i, ((lr2, lr3), s) in enumerate(zip(H.LR_PAIRS, r["scores"]))]
    H.write_csv(out / "stability_runs.csv", ("method", "pair", "lr2d", "lr3d", "miou_ens"), rows)
    H.write_csv(out / "stability.csv", ("method", "mean", "std"), [(m, r["mean"], r["std"]) for m, r in report.items()])


def cmd_sweep_ablation(cfg, out: Path) -> None:
    model = _model(cfg)
    _provenance(out, cfg, model)
    target = _frames(cfg, "target")
    rows = H.sweep_ablation(model, target, cfg.adapt, eval_batch_stats=cfg.eval_batch_stats)
    H.write_csv(out / "ablation.csv", H.ABLATION_COLUMNS, rows)
    curves = H.pseudo_accuracy_curve(model, target, cfg.adapt, cfg.accuracy_checkpoints)
    H.write_csv(out / "pseudo_accuracy.csv", ("variant", "iteration", "accuracy"), H.curve_rows(curves))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "sweep-lr": cmd_sweep_lr,
    "sweep-ablation": cmd_sweep_ablation,
}


def _apply_seed(cfg: H.ExperimentConfig, command: str, seed: int) -> H.ExperimentConfig:
    if command == "gen-data":
        return replace(cfg, data_seed=seed)
    if command == "pretrain":
        return replace(cfg, pretrain=replace(cfg.pretrain, seed=seed))
    return replace(cfg, adapt=replace(cfg.adapt, seed=seed))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmtta", description="Multi-modal test-time adaptation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat key = value config file (defaults if omitted)")
        p.add_argument("--out", type=Path, help="output directory (overrides the config's 'out')")
        p.add_argument("--seed", type=int, help="seed for this stage: data, pretraining or adaptation")
        if name == "sweep-lr":
            p.add_argument("--methods", default=",".join(STABILITY_METHODS))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = H.load_config(args.config) if args.config else H.ExperimentConfig()
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = _apply_seed(cfg, args.command, args.seed)
        cfg.adapt.validate()
        out = args.out or Path(cfg.out)
        if args.command == "sweep-lr":
            methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
            unknown = [m for m in methods if m not in METHODS]
            if unknown or not methods:
                raise ConfigError(f"unknown methods: {', '.join(unknown) or '(none given)'}")
            cmd_sweep_lr(cfg, out, methods)
        else:
            COMMANDS[args.command](cfg, out)
    except (ConfigError, CheckpointError, D.DatasetFormatError, KeyError, ValueError, OSError) as exc:
        print(f"mmtta {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (H.NumericError, FloatingPointError) as exc:
        print(f"mmtta {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
