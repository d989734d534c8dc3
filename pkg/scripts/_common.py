"""Shared setup for the experiment scripts: the pinned scenario and its pretrained model."""

import argparse
import logging
from pathlib import Path

from mmtta import data as D
from mmtta import harness as H


def parser(doc: str, default_out: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=doc.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(default_out))
    ap.add_argument("--preset", default="sensor-swap", choices=sorted(D.PRESETS))
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--pretrain-seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def setup(args):
    """(model, target frames, K) for the chosen preset; pretraining takes about 20 s."""
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    spec = D.preset(args.preset, seed=args.data_seed)
    model = H.pretrain(D.generate(spec, "source"), spec.K, H.PretrainConfig(seed=args.pretrain_seed))
    return model, D.generate(spec, "target"), spec.K
