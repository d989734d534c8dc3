"""Acceptance criteria 1-10, one test per criterion.

Under pytest a PASS/FAIL line per criterion is printed in the terminal
summary. The file also runs on its own:

    python3 tests/test_acceptance.py
"""

from __future__ import annotations

import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles as O  # noqa: E402
from conftest import Pinned, build_pinned, gradient_case  # noqa: E402

from mmtta import cli  # noqa: E402
from mmtta import data as D  # noqa: E402
from mmtta import harness as H  # noqa: E402
from mmtta import methods as M  # noqa: E402
from mmtta.methods import AdaptationConfig, adapt_step  # noqa: E402
from mmtta.model import (  # noqa: E402
    MODALITIES,
    CheckpointError,
    ConfigError,
    argmax_rows,
    build_model,
    checkpoint_bytes,
    load_checkpoint,
    parameter_budget,
    save_checkpoint,
)

SEEDS = range(5)
BASELINES = ("tent", "tent_ens", "xmuda", "xmuda_pl")
MMTTA = ("mmtta_hard", "mmtta_soft")
NON_ORACLE = tuple(m for m in M.METHODS if m not in ("oracle_tta", "pseudo_ablation"))
TITLES = {
    1: "gradient correctness vs central differences",
    2: "slow-model momentum rule is exact",
    3: "pseudo-label selectors match brute force",
    4: "consistency-score scaling invariance",
    5: "desk-scale method ordering over 5 seeds",
    6: "learning-rate stability",
    7: "pseudo-label accuracy ordering",
    8: "oracle dominance on every seed",
    9: "parameter budget and BN-only changes",
    10: "determinism and file formats",
}
RESULTS: dict[int, tuple[bool, str]] = {}


@dataclass
class Context:
    pinned: Pinned
    runs: dict = field(default_factory=dict)

    def run(self, method: str, seed: int) -> H.AdaptResult:
        key = (method, seed)
        if key not in self.runs:
            cfg = H.tuned(AdaptationConfig(seed=seed), method)
            self.runs[key] = H.adapt(self.pinned.model, self.pinned.target, cfg)
        return self.runs[key]

    def score(self, method: str, seed: int) -> float:
        return self.run(method, seed).metrics.miou["ens"]


# --- criteria -------------------------------------------------------------------


def criterion_1(ctx):
    t0 = time.perf_counter()
    worst, failures = 0.0, []
    for seed in range(20):
        for kind in ("entropy", "consistency", "pseudo", "mmtta"):
            params, analytic, numeric = gradient_case(seed, kind)
            for p in params:
                err = np.abs(analytic[p] - numeric[p])
                tol = np.maximum(1e-3 * np.abs(numeric[p]), 1e-5)
                worst = max(worst, float(np.max(err / tol)))
                if np.any(err > tol):
                    failures.append((seed, kind))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 10.0
    return ok, f"80 cases, worst error/tolerance {worst:.3f}, {elapsed:.1f}s (limit 10s), failures {failures[:3]}"


def _chunk_order(frames, seed):
    units = H._chunks(frames, AdaptationConfig().chunk_points)
    return [units[i] for i in D.philox(seed, 5).permutation(len(units))]


def criterion_2(ctx):
    pin = ctx.pinned
    worst, steps = 0.0, 0
    for method in MMTTA:
        model = pin.model.copy()
        model.reset_roles()
        cfg = H.tuned(AdaptationConfig(), method)
        for f, a, b in _chunk_order(pin.target, 0):
            prev = {m: [bn.clone() for bn in model[m, "slow"].bn_states] for m in MODALITIES}
            fr = pin.target[f]
            adapt_step(model, fr.x2d[a:b], fr.x3d[a:b], cfg)
            steps += 1
            for m in MODALITIES:
                for s, fa, o in zip(model[m, "slow"].bn_states, model[m, "fast"].bn_states, prev[m]):
                    for k in ("mu", "sigma", "gamma", "beta"):
                        want = (1 - cfg.lam) * fa.components()[k].astype(np.float64) + cfg.lam * o.components()[k].astype(np.float64)
                        err = np.abs(s.components()[k] - want) / np.maximum(1.0, np.abs(want))
                        worst = max(worst, float(err.max()))
    exact = True
    for method in MMTTA:
        res = H.adapt(pin.model, pin.target, H.tuned(AdaptationConfig(lam=1.0), method))
        for m in MODALITIES:
            for s, src in zip(res.model[m, "slow"].bn_states, res.model[m, "source"].bn_states):
                exact &= all(np.array_equal(v, src.components()[k]) for k, v in s.components().items())
    ok = worst <= 1e-7 and exact
    return ok, f"{steps} steps, worst scaled deviation {worst:.2e} (limit 1e-7); lambda=1 keeps source stats: {exact}"


def _selector_cases(rng, theta):
    n, k = int(rng.integers(1, 33)), int(rng.integers(2, 6))
    p2 = T_softmax(rng.normal(0, 2, (n, k)))
    p3 = T_softmax(rng.normal(0, 2, (n, k)))
    y2, y3 = argmax_rows(p2), argmax_rows(p3)
    z2, z3 = rng.integers(0, 4, n).astype(float), rng.integers(0, 4, n).astype(float)
    L = lambda a: [list(map(float, r)) for r in a]  # noqa: E731
    return {
        "hard": (M.inter_pr_hard(y2, y3, z2, z3, theta), O.hard_select(y2.tolist(), y3.tolist(), z2.tolist(), z3.tolist(), theta)),
        "soft": (M.inter_pr_soft(p2, p3, z2, z3, theta), O.soft_select(L(p2), L(p3), z2.tolist(), z3.tolist(), theta)),
        "consensus": (M.ablation_fuse(y2, y3, p2, p3, "consensus", theta), O.consensus(y2.tolist(), y3.tolist(), L(p2), L(p3), theta)),
        "merge": (M.ablation_fuse(y2, y3, p2, p3, "merge", theta), O.merge(L(p2), L(p3), theta)),
        "entropy": (M.ablation_entropy_select(p2, p3, y2, y3, theta), O.entropy_select(L(p2), L(p3), y2.tolist(), y3.tolist(), theta)),
    }


def T_softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def criterion_3(ctx):
    mismatches = []
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        theta = [None, 0.1, 0.3, 0.5, 1.0][i % 5]
        for name, (got, (labels, valid)) in _selector_cases(rng, theta).items():
            if [got.labels.tolist(), got.valid.tolist()] != list(O.pseudo_set(labels, valid)):
                mismatches.append((i, name))
    return not mismatches, f"100 fixtures x 5 selectors, mismatches: {mismatches[:5] or 'none'}"


def criterion_4(ctx):
    broken = []
    for i in range(50):
        rng = np.random.default_rng(2000 + i)
        n, k = int(rng.integers(1, 33)), int(rng.integers(2, 6))
        p2, p3 = T_softmax(rng.normal(0, 2, (n, k))), T_softmax(rng.normal(0, 2, (n, k)))
        y2, y3 = argmax_rows(p2), argmax_rows(p3)
        z2, z3 = rng.exponential(5, n), rng.exponential(5, n)
        c = 10 ** rng.uniform(-3, 3)
        theta = (0.1, 0.3, 0.5)[i % 3]
        if not M.inter_pr_hard(y2, y3, z2, z3, theta).same_as(M.inter_pr_hard(y2, y3, c * z2, c * z3, theta)):
            broken.append((i, "hard"))
        if not M.inter_pr_soft(p2, p3, z2, z3, theta).same_as(M.inter_pr_soft(p2, p3, c * z2, c * z3, theta)):
            broken.append((i, "soft"))
    return not broken, f"50 fixtures, changed pseudo-label sets: {broken[:5] or 'none'}"


def criterion_5(ctx):
    t0 = time.perf_counter()
    pin = ctx.pinned
    source_only = H.evaluate(pin.model, pin.target).miou["ens"]
    mean = {m: float(np.mean([ctx.score(m, s) for s in SEEDS])) for m in BASELINES + MMTTA}
    elapsed = time.perf_counter() - t0
    best_base = max(BASELINES, key=mean.get)
    margin = min(mean[m] for m in MMTTA) - max(mean[best_base], source_only)
    ok = (mean["mmtta_soft"] >= mean["mmtta_hard"] - 0.005 and margin >= 0.02 and elapsed < 300)
    table = ", ".join(f"{m} {100 * v:.1f}" for m, v in mean.items())
    return ok, (f"seed-mean mIoU: source-only {100 * source_only:.1f}, {table}; "
                f"margin over best baseline ({best_base}) {100 * margin:.1f} pts (need 2.0); {elapsed:.0f}s (limit 300s)")


def criterion_6(ctx):
    pin = ctx.pinned
    report = H.sweep_lr(pin.model, pin.target, AdaptationConfig(), ("tent", "xmuda") + MMTTA)
    ok = all(report[a]["std"] < report[b]["std"] and report[a]["mean"] > report[b]["mean"]
             for a in MMTTA for b in ("tent", "xmuda"))
    detail = "; ".join(f"{m} mean {100 * r['mean']:.1f} std {100 * r['std']:.2f}" for m, r in report.items())
    return ok, detail


def criterion_7(ctx):
    curves = H.pseudo_accuracy_curve(ctx.pinned.model, ctx.pinned.target, AdaptationConfig())
    mean = {k: 100 * float(np.mean([a for _, a in v])) for k, v in curves.items()}
    inter = min(mean["intra_inter_hard"], mean["intra_inter_soft"])
    ok = inter - mean["intra_pg"] >= 1.0 and mean["intra_pg"] - mean["fast"] >= 1.0
    return ok, ", ".join(f"{k} {v:.1f}%" for k, v in mean.items())


def criterion_8(ctx):
    losses = []
    gaps = []
    for s in SEEDS:
        oracle = ctx.score("oracle_tta", s)
        best = max(NON_ORACLE, key=lambda m: ctx.score(m, s))
        gaps.append(oracle - ctx.score(best, s))
        if gaps[-1] < 0:
            losses.append((s, best))
    return not losses, (f"oracle minus best other method per seed (pts): {', '.join(f'{100 * g:.1f}' for g in gaps)}; "
                        f"violations: {losses or 'none'}")


def criterion_9(ctx):
    _, _, ratio = parameter_budget(build_model(16, 12, 6))
    try:
        build_model(16, 12, 6, hidden=16)
        rejects = False
    except ConfigError:
        rejects = True
    before = ctx.pinned.model
    after = ctx.run("mmtta_soft", 0).model
    frozen_same = all(
        np.array_equal(a.W.data, b.W.data) and np.array_equal(a.b.data, b.b.data)
        for m in MODALITIES for role in ("source", "fast", "slow")
        for a, b in zip(before[m, "source"].layers, after[m, role].layers))
    source_same = all(
        np.array_equal(v, b.components()[k])
        for m in MODALITIES for a, b in zip(before[m, "source"].bn_states, after[m, "source"].bn_states)
        for k, v in a.components().items())
    bn_changed = any(not np.array_equal(a.gamma.data, b.gamma.data)
                     for m in MODALITIES for a, b in zip(before[m, "source"].bn_states, after[m, "fast"].bn_states))
    ok = ratio < 0.01 and rejects and frozen_same and source_same and bn_changed
    return ok, (f"trainable ratio {100 * ratio:.3f}% (< 1%), narrow model rejected: {rejects}, "
                f"weights unchanged: {frozen_same}, source BN unchanged: {source_same}, fast BN adapted: {bn_changed}")


def criterion_10(ctx):
    pin = ctx.pinned
    checks = {}
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        save_checkpoint(pin.model, tmp / "ck.bin")
        D.save(pin.target, tmp / "target.mmds", pin.spec.K)
        (tmp / "run.cfg").write_text(f"checkpoint_path = {tmp / 'ck.bin'}\ntarget_path = {tmp / 'target.mmds'}\n"
                                     "adapt.method = mmtta_soft\n")
        codes = [cli.main(["adapt", "--config", str(tmp / "run.cfg"), "--out", str(tmp / d), "--seed", "1"])
                 for d in ("a", "b")]
        checks["cli exit codes 0"] = codes == [0, 0]
        checks["identical CSVs"] = all((tmp / "a" / n).read_bytes() == (tmp / "b" / n).read_bytes()
                                       for n in ("steps.csv", "metrics.csv", "pseudo_accuracy.csv"))
        frames, K = D.load(tmp / "target.mmds")
        checks["dataset round trip"] = K == pin.spec.K and all(
            np.array_equal(a.x2d, b.x2d) and np.array_equal(a.x3d, b.x3d) and np.array_equal(a.labels, b.labels)
            for a, b in zip(frames, pin.target)) and D.dataset_bytes(frames, K) == (tmp / "target.mmds").read_bytes()
        checks["checkpoint round trip"] = checkpoint_bytes(load_checkpoint(tmp / "ck.bin")) == (tmp / "ck.bin").read_bytes()
        rejected = 0
        ds, ck = (tmp / "target.mmds").read_bytes(), (tmp / "ck.bin").read_bytes()
        for bad in (b"X" + ds[1:], ds[:5] + b"\x07\x00" + ds[7:], ds[:12]):
            (tmp / "bad.mmds").write_bytes(bad)
            try:
                D.load(tmp / "bad.mmds")
            except D.DatasetFormatError:
                rejected += 1
        for bad in (b"X" + ck[1:], ck[:6] + b"\x07\x00" + ck[8:], ck[:10]):
            (tmp / "bad.bin").write_bytes(bad)
            try:
                load_checkpoint(tmp / "bad.bin")
            except CheckpointError:
                rejected += 1
        checks["6/6 corrupted headers rejected"] = rejected == 6
    return all(checks.values()), ", ".join(f"{k}: {v}" for k, v in checks.items())


CRITERIA = {n: globals()[f"criterion_{n}"] for n in TITLES}


def run_criterion(n: int, ctx: Context) -> tuple[bool, str]:
    ok, detail = CRITERIA[n](ctx)
    RESULTS[n] = (bool(ok), detail)
    return bool(ok), detail


def summary_lines() -> list[str]:
    return [f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {TITLES[n]} | {detail}" for n, (ok, detail) in sorted(RESULTS.items())]


# --- pytest entry points ----------------------------------------------------------


@pytest.fixture(scope="module")
def ctx(pinned):
    return Context(pinned)


@pytest.mark.parametrize("n", list(TITLES))
def test_criterion(n, ctx):
    ok, detail = run_criterion(n, ctx)
    assert ok, detail


if __name__ == "__main__":
    context = Context(build_pinned())
    for n in TITLES:
        run_criterion(n, context)
        print(summary_lines()[-1], flush=True)
    print(f"{sum(ok for ok, _ in RESULTS.values())}/{len(RESULTS)} criteria passed")
    sys.exit(0 if all(ok for ok, _ in RESULTS.values()) else 1)
