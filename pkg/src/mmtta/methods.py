"""Test-time adaptation objectives, pseudo-label construction and the step driver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import (
    MODALITIES,
    ConfigError,
    MultiModalModel,
    argmax_rows,
    fuse_slow_fast,
    momentum_update,
)

METHODS = (
    "tent",
    "tent_ens",
    "xmuda",
    "xmuda_tent",
    "xmuda_tent_ens",
    "xmuda_pl",
    "xmuda_pl_tent_ens",
    "mmtta_hard",
    "mmtta_soft",
    "oracle_tta",
    "pseudo_ablation",
)
SLOW_METHODS = ("mmtta_hard", "mmtta_soft")
FUSIONS = ("none", "consensus", "merge", "entropy", "hard", "soft")


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    valid: np.ndarray
    zeta2d: np.ndarray | None = None
    zeta3d: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        # labels outside the mask carry no meaning; pin them to -1
        self.labels = np.where(self.valid, self.labels, -1)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def same_as(self, other: "PseudoLabelSet") -> bool:
        return bool(np.array_equal(self.valid, other.valid) and np.array_equal(self.labels, other.labels))


@dataclass
class AdaptationConfig:
    method: str = "mmtta_soft"
    lam: float = 0.99
    theta: float = 0.3
    lr2d: float = 10.0
    lr3d: float = 24.0
    epsilon: float = 1e-6
    # each frame is cut into consecutive chunks of this many points (0 keeps
    # whole frames); one optimizer step consumes `batch_size` chunks
    chunk_points: int = 64
    batch_size: int = 1
    seed: int = 0
    # the mmtta pseudo-label loss is scored on the fast output (default) or on the slow/fast fusion
    score_fused: bool = False
    grad_through_stats: bool = True
    # only read when method == "pseudo_ablation"
    use_slow: bool = True
    fusion: str = "none"
    use_threshold: bool = True

    def validate(self) -> "AdaptationConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must be in [0, 1], got {self.lam}")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigError(f"theta must be in (0, 1], got {self.theta}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.chunk_points < 0 or self.chunk_points == 1:
            raise ConfigError("chunk_points must be 0 or >= 2")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.method == "pseudo_ablation" and self.fusion in ("hard", "soft") and not self.use_slow:
            raise ConfigError("consistency selection needs the slow model")
        return self

    @property
    def uses_slow(self) -> bool:
        return self.method in SLOW_METHODS or (self.method == "pseudo_ablation" and self.use_slow)


@dataclass
class StepReport:
    losses: dict[str, float]
    valid_fraction: float
    skipped: bool = False
    pseudo: PseudoLabelSet | None = None
    pseudo_accuracy: float | None = None
    extra: dict = field(default_factory=dict)


# --- losses on plain arrays --------------------------------------------------


def _log(p):
    return np.log(np.maximum(p, T.LOG_FLOOR))


def row_entropy(p: np.ndarray) -> np.ndarray:
    return -(p * _log(p)).sum(axis=1)


def row_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return (p * (_log(p) - _log(q))).sum(axis=1)


def entropy_loss(p2d: np.ndarray, p3d: np.ndarray) -> float:
    return float(row_entropy(p2d).mean() + row_entropy(p3d).mean())


def consistency_loss(p2d: np.ndarray, p3d: np.ndarray) -> float:
    return float((row_kl(p2d, p3d) + row_kl(p3d, p2d)).mean())


def mmtta_loss(p2d: np.ndarray, p3d: np.ndarray, ens: PseudoLabelSet) -> float | None:
    """Cross-entropy of both branches against the shared labels; None if nothing is valid."""
    if ens.n_valid == 0:
        return None
    rows = np.nonzero(ens.valid)[0]
    lab = ens.labels[rows]
    return float(-_log(p2d[rows, lab]).mean() - _log(p3d[rows, lab]).mean())


# --- pseudo labels -----------------------------------------------------------


def ratio_mask(labels: np.ndarray, score: np.ndarray, theta: float, candidates: np.ndarray | None = None) -> np.ndarray:
    """Class-wise ratio rule: per class keep the ceil(theta * n_k) highest-scoring points.

    Ties in score are broken by lower point index.
    """
    if not 0.0 < theta <= 1.0:
        raise ConfigError(f"theta must be in (0, 1], got {theta}")
    labels = np.asarray(labels)
    score = np.asarray(score, dtype=np.float64)
    cand = np.ones(labels.shape[0], bool) if candidates is None else np.asarray(candidates, bool)
    keep = np.zeros(labels.shape[0], bool)
    for k in np.unique(labels[cand]):
        idx = np.nonzero(cand & (labels == k))[0]
        n_keep = math.ceil(theta * idx.size - 1e-9)
        order = np.lexsort((idx, -score[idx]))
        keep[idx[order[:n_keep]]] = True
    return keep


def threshold_pseudo_labels(p: np.ndarray, theta: float) -> PseudoLabelSet:
    labels = argmax_rows(p)
    conf = p[np.arange(p.shape[0]), labels]
    return PseudoLabelSet(labels, ratio_mask(labels, conf, theta))


def consistency_measure(p_slow: np.ndarray, p_fast: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Per-point mean of inverse KL divergences in both directions."""
    ps = np.asarray(p_slow, np.float64)
    pf = np.asarray(p_fast, np.float64)
    return (1.0 / (row_kl(ps, pf) + epsilon) + 1.0 / (row_kl(pf, ps) + epsilon)) / 2.0


def _max_consistency_mask(labels, zeta2d, zeta3d, theta, candidates=None):
    if theta is None:
        return np.ones(labels.shape[0], bool) if candidates is None else np.asarray(candidates, bool)
    return ratio_mask(labels, np.maximum(zeta2d, zeta3d), theta, candidates)


def inter_pr_hard(y2d, y3d, zeta2d, zeta3d, theta: float | None = None) -> PseudoLabelSet:
    zeta2d = np.asarray(zeta2d, np.float64)
    zeta3d = np.asarray(zeta3d, np.float64)
    labels = np.where(zeta2d >= zeta3d, y2d, y3d)
    return PseudoLabelSet(labels, _max_consistency_mask(labels, zeta2d, zeta3d, theta), zeta2d, zeta3d)


def soft_weights(zeta2d, zeta3d) -> tuple[np.ndarray, np.ndarray]:
    zeta2d = np.asarray(zeta2d, np.float64)
    zeta3d = np.asarray(zeta3d, np.float64)
    denom = zeta2d + zeta3d
    ok = denom > 0
    w2 = np.where(ok, zeta2d / np.where(ok, denom, 1.0), 0.0)
    return w2, 1.0 - w2


def inter_pr_soft(p2d, p3d, zeta2d, zeta3d, theta: float | None = None) -> PseudoLabelSet:
    zeta2d = np.asarray(zeta2d, np.float64)
    zeta3d = np.asarray(zeta3d, np.float64)
    w2, w3 = soft_weights(zeta2d, zeta3d)
    pw = w2[:, None] * np.asarray(p2d, np.float64) + w3[:, None] * np.asarray(p3d, np.float64)
    labels = argmax_rows(pw)
    ok = (zeta2d + zeta3d) > 0
    return PseudoLabelSet(labels, _max_consistency_mask(labels, zeta2d, zeta3d, theta, ok), zeta2d, zeta3d)


def ablation_fuse(y2d, y3d, p2d, p3d, variant: str, theta: float | None = None) -> PseudoLabelSet:
    """Consensus keeps points where both modalities agree; merge takes the mean prediction.

    With `theta`, the ratio rule runs on the mean-prediction confidence of the chosen label.
    """
    pm = (np.asarray(p2d, np.float64) + np.asarray(p3d, np.float64)) / 2
    if variant == "consensus":
        labels = np.asarray(y2d)
        cand = labels == np.asarray(y3d)
    elif variant == "merge":
        labels = argmax_rows(pm)
        cand = np.ones(labels.shape[0], bool)
    else:
        raise ConfigError(f"unknown fusion variant {variant!r}")
    if theta is None:
        return PseudoLabelSet(labels, cand)
    conf = pm[np.arange(labels.shape[0]), labels]
    return PseudoLabelSet(labels, ratio_mask(labels, conf, theta, cand))


def ablation_entropy_select(p2d, p3d, y2d, y3d, theta: float | None = None) -> PseudoLabelSet:
    """Per point take the modality with lower prediction entropy (ties to 2D)."""
    h2, h3 = row_entropy(np.asarray(p2d, np.float64)), row_entropy(np.asarray(p3d, np.float64))
    pick2 = h2 <= h3
    labels = np.where(pick2, y2d, y3d)
    if theta is None:
        return PseudoLabelSet(labels, np.ones(labels.shape[0], bool))
    # lower entropy = more confident, so the ratio rule ranks by negated entropy
    return PseudoLabelSet(labels, ratio_mask(labels, -np.minimum(h2, h3), theta))


@dataclass
class IntraPG:
    p_slow: dict[str, np.ndarray]
    p_fast: dict[str, np.ndarray]
    p_fused: dict[str, np.ndarray]
    y: dict[str, np.ndarray]


def intra_pg(model: MultiModalModel, x2d, x3d) -> IntraPG:
    """Slow (stored stats) and fast (batch stats) predictions per modality, fused and argmaxed."""
    xs = {"2d": x2d, "3d": x3d}
    ps, pf, fused, y = {}, {}, {}, {}
    for m in MODALITIES:
        ps[m] = T.softmax_rows_array(model[m, "slow"].logits(xs[m]))
        pf[m] = T.softmax_rows_array(model[m, "fast"].logits(xs[m]))
        fused[m] = fuse_slow_fast(ps[m], pf[m])
        y[m] = argmax_rows(fused[m])
    return IntraPG(ps, pf, fused, y)


def build_pseudo_labels(cfg: AdaptationConfig, p_fast: dict, p_slow: dict | None) -> PseudoLabelSet:
    """Shared pseudo labels for the mmtta methods and the ablation grid."""
    fusion = "hard" if cfg.method == "mmtta_hard" else "soft" if cfg.method == "mmtta_soft" else cfg.fusion
    use_slow = cfg.uses_slow
    theta = cfg.theta if (cfg.method in SLOW_METHODS or cfg.use_threshold) else None
    if use_slow:
        p = {m: fuse_slow_fast(p_slow[m], p_fast[m]) for m in MODALITIES}
    else:
        p = dict(p_fast)
    y = {m: argmax_rows(p[m]) for m in MODALITIES}
    if fusion in ("hard", "soft"):
        z2 = consistency_measure(p_slow["2d"], p_fast["2d"], cfg.epsilon)
        z3 = consistency_measure(p_slow["3d"], p_fast["3d"], cfg.epsilon)
        if fusion == "hard":
            return inter_pr_hard(y["2d"], y["3d"], z2, z3, theta)
        return inter_pr_soft(p["2d"], p["3d"], z2, z3, theta)
    if fusion in ("consensus", "merge"):
        return ablation_fuse(y["2d"], y["3d"], p["2d"], p["3d"], fusion, theta)
    if fusion == "entropy":
        return ablation_entropy_select(p["2d"], p["3d"], y["2d"], y["3d"], theta)
    raise ConfigError("fusion 'none' yields per-branch labels; use per_branch_pseudo_labels")


def per_branch_pseudo_labels(p: dict, theta: float | None) -> dict[str, PseudoLabelSet]:
    out = {}
    for m in MODALITIES:
        if theta is None:
            y = argmax_rows(p[m])
            out[m] = PseudoLabelSet(y, np.ones(y.shape[0], bool))
        else:
            out[m] = threshold_pseudo_labels(p[m], theta)
    return out


# --- the adaptation step -----------------------------------------------------


def _method_terms(cfg: AdaptationConfig) -> set[str]:
    return {
        "tent": {"ent"},
        "tent_ens": {"ent_ens"},
        "xmuda": {"cons"},
        "xmuda_tent": {"ent", "cons"},
        "xmuda_tent_ens": {"ent_ens", "cons"},
        "xmuda_pl": {"cons", "pseudo"},
        "xmuda_pl_tent_ens": {"ent_ens", "cons", "pseudo"},
        "mmtta_hard": {"mmtta"},
        "mmtta_soft": {"mmtta"},
        "oracle_tta": {"oracle"},
        "pseudo_ablation": {"mmtta"} if cfg.fusion != "none" else {"pseudo"},
    }[cfg.method]


def adapt_step(model: MultiModalModel, x2d, x3d, cfg: AdaptationConfig, labels=None) -> StepReport:
    """One SGD step on the fast branches' BN affine parameters.

    `labels` are consumed only by oracle_tta; for other methods they are used
    solely to report pseudo-label accuracy.
    """
    cfg.validate()
    terms = _method_terms(cfg)
    xs = {"2d": x2d, "3d": x3d}
    tape = T.GradTape()
    logits = {m: model[m, "fast"].forward(tape, xs[m]) for m in MODALITIES}
    probs = {m: T.softmax_rows(logits[m]) for m in MODALITIES}
    p_fast = {m: probs[m].value for m in MODALITIES}
    p_slow = None
    if cfg.uses_slow:
        p_slow = {m: T.softmax_rows_array(model[m, "slow"].logits(xs[m])) for m in MODALITIES}

    parts: dict[str, T.Var] = {}
    pseudo = None
    if "ent" in terms:
        parts["ent"] = T.add(T.mean_entropy(probs["2d"]), T.mean_entropy(probs["3d"]))
    if "ent_ens" in terms:
        parts["ent_ens"] = T.mean_entropy(T.softmax_rows(T.average(logits["2d"], logits["3d"])))
    if "cons" in terms:
        parts["cons"] = T.mean_symmetric_kl(probs["2d"], probs["3d"])
    if "pseudo" in terms:
        if cfg.method == "pseudo_ablation":
            src = {m: fuse_slow_fast(p_slow[m], p_fast[m]) for m in MODALITIES} if cfg.uses_slow else p_fast
            per = per_branch_pseudo_labels(src, cfg.theta if cfg.use_threshold else None)
        else:
            per = per_branch_pseudo_labels(p_fast, cfg.theta)
        for m in MODALITIES:
            if per[m].n_valid:
                parts[f"pseudo_{m}"] = T.masked_nll(probs[m], per[m].labels, per[m].valid)
        pseudo = per
    if "mmtta" in terms:
        pseudo = build_pseudo_labels(cfg, p_fast, p_slow)
        if pseudo.n_valid:
            if cfg.score_fused and cfg.uses_slow:
                scored = {m: T.average(probs[m], tape.constant(p_slow[m])) for m in MODALITIES}
            else:
                scored = probs
            parts["mmtta"] = T.add(*(T.masked_nll(scored[m], pseudo.labels, pseudo.valid) for m in MODALITIES))
    if "oracle" in terms:
        if labels is None:
            raise ConfigError("oracle_tta needs ground-truth labels")
        parts["oracle"] = T.add(*(T.masked_nll(probs[m], labels) for m in MODALITIES))

    skipped = not parts
    losses = {k: float(v.value.reshape(())) for k, v in parts.items()}
    if not skipped:
        total = T.add(*parts.values()) if len(parts) > 1 else next(iter(parts.values()))
        losses["total"] = float(total.value.reshape(()))
        grads = T.backward(tape, total)
        for m, lr in (("2d", cfg.lr2d), ("3d", cfg.lr3d)):
            for p in model[m, "fast"].affine_params():
                g = grads.get(p)
                if g is not None:
                    p.data = (p.data - p.data.dtype.type(lr) * g).astype(p.data.dtype)

    if cfg.uses_slow:
        for m in MODALITIES:
            slow, fast = model[m, "slow"], model[m, "fast"]
            slow.bn_states = [momentum_update(s, f, cfg.lam) for s, f in zip(slow.bn_states, fast.bn_states)]

    report = StepReport(losses, 1.0, skipped)
    if isinstance(pseudo, PseudoLabelSet):
        report.pseudo = pseudo
        report.valid_fraction = pseudo.n_valid / pseudo.valid.shape[0]
        if labels is not None and pseudo.n_valid:
            lab = np.asarray(labels).reshape(-1)
            report.pseudo_accuracy = float((pseudo.labels[pseudo.valid] == lab[pseudo.valid]).mean())
    elif isinstance(pseudo, dict):
        n = sum(s.valid.shape[0] for s in pseudo.values())
        nv = sum(s.n_valid for s in pseudo.values())
        report.valid_fraction = nv / n
        if labels is not None and nv:
            lab = np.asarray(labels).reshape(-1)
            hits = sum(int((s.labels[s.valid] == lab[s.valid]).sum()) for s in pseudo.values())
            report.pseudo_accuracy = hits / nv
    return report
