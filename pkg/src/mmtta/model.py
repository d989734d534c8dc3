"""Two-branch segmentation model with source / fast / slow batch-norm roles."""

from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Param

ROLES = ("source", "fast", "slow")
MODALITIES = ("2d", "3d")
BUDGET = 0.01

CKPT_MAGIC = b"MMTTA1"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class BNState:
    """Per-layer (mu, sigma, gamma, beta). Stored as (1, d) rows."""

    mu: np.ndarray
    sigma: np.ndarray
    gamma: Param
    beta: Param

    def __post_init__(self):
        d = self.mu.shape[-1]
        if not (self.sigma.shape[-1] == self.gamma.data.shape[-1] == self.beta.data.shape[-1] == d):
            raise T.ShapeError("BNState components must share one length")

    @classmethod
    def identity(cls, d: int, dtype=np.float32, trainable: bool = False) -> "BNState":
        return cls(
            mu=np.zeros((1, d), dtype),
            sigma=np.ones((1, d), dtype),
            gamma=Param(np.ones((1, d), dtype), trainable, "gamma"),
            beta=Param(np.zeros((1, d), dtype), trainable, "beta"),
        )

    @property
    def width(self) -> int:
        return self.mu.shape[-1]

    def components(self) -> dict[str, np.ndarray]:
        return {"mu": self.mu, "sigma": self.sigma, "gamma": self.gamma.data, "beta": self.beta.data}

    def clone(self, trainable: bool | None = None) -> "BNState":
        tr = self.gamma.trainable if trainable is None else trainable
        return BNState(
            self.mu.copy(),
            self.sigma.copy(),
            Param(self.gamma.data.copy(), tr, "gamma"),
            Param(self.beta.data.copy(), tr, "beta"),
        )


@dataclass
class Linear:
    W: Param
    b: Param


@dataclass
class BranchNet:
    """One modality's network. `layers` is shared between roles of a branch.

    layers[:-1] are trunk blocks (linear -> BN -> ReLU), layers[-1] is the
    classifier. Only `bn_states` differ between the source, fast and slow roles.
    """

    layers: list[Linear]
    bn_states: list[BNState]
    role: str = "source"
    grad_through_stats: bool = True

    @property
    def in_width(self) -> int:
        return self.layers[0].W.data.shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].W.data.shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.in_width] + [layer.W.data.shape[1] for layer in self.layers]

    @property
    def uses_batch_stats(self) -> bool:
        return self.role == "fast"

    def affine_params(self) -> list[Param]:
        return [p for bn in self.bn_states for p in (bn.gamma, bn.beta)]

    def forward(self, tape: T.GradTape, x, batch_stats: bool | None = None) -> T.Var:
        """Record a forward pass on `tape`; returns the logits."""
        x = T.as_tensor(x)
        if x.shape[1] != self.in_width:
            raise T.ShapeError(f"{self.role} branch expects width {self.in_width}, got {x.shape[1]}")
        batch_stats = self.uses_batch_stats if batch_stats is None else batch_stats
        h = tape.constant(x.astype(self.layers[0].W.data.dtype, copy=False))
        for layer, bn in zip(self.layers[:-1], self.bn_states):
            h = T.linear(h, tape.param(layer.W), tape.param(layer.b))
            h = T.batchnorm(h, bn, tape.param(bn.gamma), tape.param(bn.beta), batch_stats, self.grad_through_stats)
            h = T.relu(h)
        head = self.layers[-1]
        return T.linear(h, tape.param(head.W), tape.param(head.b))

    def logits(self, x, batch_stats: bool | None = None) -> np.ndarray:
        return self.forward(T.GradTape(), x, batch_stats).value


def predict(branch: BranchNet, x) -> np.ndarray:
    """Class probabilities; the fast role normalizes with batch statistics."""
    return T.softmax_rows_array(branch.logits(x))


def build_branch(in_width: int, hidden: int, depth: int, num_classes: int, rng: np.random.Generator,
                 dtype=np.float32) -> BranchNet:
    widths = [in_width] + [hidden] * depth
    layers = []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        W = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
        layers.append(Linear(Param(W.astype(dtype), False, "W"), Param(np.zeros((1, d_out), dtype), False, "b")))
    W = rng.standard_normal((hidden, num_classes)) * np.sqrt(1.0 / hidden)
    layers.append(Linear(Param(W.astype(dtype), False, "W"), Param(np.zeros((1, num_classes), dtype), False, "b")))
    bns = [BNState.identity(hidden, dtype) for _ in range(depth)]
    return BranchNet(layers, bns, "source")


def role_copy(src: BranchNet, role: str) -> BranchNet:
    """A new role of the same branch: shared layers, independent BN states."""
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}")
    return BranchNet(src.layers, [bn.clone(trainable=(role == "fast")) for bn in src.bn_states], role,
                     src.grad_through_stats)


@dataclass
class MultiModalModel:
    branches: dict[str, dict[str, BranchNet]]
    num_classes: int
    hidden: int
    depth: int
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key: tuple[str, str]) -> BranchNet:
        modality, role = key
        return self.branches[modality][role]

    def reset_roles(self) -> None:
        """Re-derive fast and slow BN states from the source role."""
        for m in MODALITIES:
            src = self.branches[m]["source"]
            self.branches[m]["fast"] = role_copy(src, "fast")
            self.branches[m]["slow"] = role_copy(src, "slow")

    def set_grad_through_stats(self, flag: bool) -> None:
        for m in MODALITIES:
            for r in ROLES:
                self.branches[m][r].grad_through_stats = flag

    def copy(self) -> "MultiModalModel":
        """Deep copy; the copy's roles still share layers with each other."""
        return copy.deepcopy(self)


def build_model(f2: int, f3: int, num_classes: int, hidden: int = 320, depth: int = 3, seed: int = 0,
                dtype=np.float32, check_budget: bool = True) -> MultiModalModel:
    rng = np.random.Generator(np.random.Philox(key=seed))
    branches = {}
    for m, width in zip(MODALITIES, (f2, f3)):
        src = build_branch(width, hidden, depth, num_classes, rng, dtype)
        branches[m] = {"source": src, "fast": role_copy(src, "fast"), "slow": role_copy(src, "slow")}
    model = MultiModalModel(branches, num_classes, hidden, depth)
    if check_budget:
        parameter_budget(model)
    return model


def branch_counts(branch: BranchNet) -> tuple[int, int]:
    weights = sum(layer.W.data.size + layer.b.data.size for layer in branch.layers)
    affine = sum(bn.gamma.data.size + bn.beta.data.size for bn in branch.bn_states)
    return affine, weights + affine


def parameter_budget(model: MultiModalModel, limit: float = BUDGET) -> tuple[int, int, float]:
    """(trainable, total, ratio) over both branches; raises if any branch exceeds `limit`.

    Trainable scalars are the BN affine parameters; total counts all learnable
    scalars of one role per branch (linear weights, biases, gamma, beta).
    """
    trainable = total = 0
    for m in MODALITIES:
        a, t = branch_counts(model.branches[m]["source"])
        if a / t >= limit:
            hint = int(np.ceil(3.0 / limit)) if model.depth == 3 else None
            msg = f"{m} branch: trainable ratio {a / t:.4f} >= {limit}"
            if hint:
                msg += f"; increase hidden width (roughly >= {hint}) or reduce BN layers"
            raise ConfigError(msg)
        trainable += a
        total += t
    return trainable, total, trainable / total


def momentum_update(slow: BNState, fast: BNState, lam: float) -> BNState:
    """slow' = (1 - lam) * fast + lam * slow, for all of mu, sigma, gamma, beta."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"momentum must lie in [0, 1], got {lam}")
    if slow.width != fast.width:
        raise T.ShapeError("momentum_update: widths differ")

    def blend(s, f):
        if lam == 1.0:
            return s.copy()
        if lam == 0.0:
            return f.astype(s.dtype, copy=True)
        # blend in float64 and round once, so float32 states stay within half an ulp
        return ((1.0 - lam) * f.astype(np.float64) + lam * s.astype(np.float64)).astype(s.dtype)

    return BNState(
        blend(slow.mu, fast.mu),
        blend(slow.sigma, fast.sigma),
        Param(blend(slow.gamma.data, fast.gamma.data), slow.gamma.trainable, "gamma"),
        Param(blend(slow.beta.data, fast.beta.data), slow.beta.trainable, "beta"),
    )


def fuse_slow_fast(p_slow: np.ndarray, p_fast: np.ndarray) -> np.ndarray:
    if p_slow.shape != p_fast.shape:
        raise T.ShapeError(f"fuse: {p_slow.shape} vs {p_fast.shape}")
    return (p_slow + p_fast) / 2


def ensemble_eval(p2d: np.ndarray, p3d: np.ndarray) -> np.ndarray:
    if p2d.shape != p3d.shape:
        raise T.ShapeError(f"ensemble: {p2d.shape} vs {p3d.shape}")
    return (p2d + p3d) / 2


def argmax_rows(p: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(p, axis=1)


# --- checkpoints ------------------------------------------------------------
# Layout: magic, then <u16 version, u32 K, u32 depth, u32 hidden, u32 f2, u32 f3>,
# then per modality (2d, 3d), per role (source, fast, slow): the linear
# weights/biases once (source role only), then each BN layer's mu, sigma,
# gamma, beta; all as little-endian float32 in row-major order.

_HEADER = struct.Struct("<HIIIII")


def _tensors(model: MultiModalModel):
    for m in MODALITIES:
        src = model.branches[m]["source"]
        for layer in src.layers:
            yield layer.W.data
            yield layer.b.data
        for r in ROLES:
            for bn in model.branches[m][r].bn_states:
                yield bn.mu
                yield bn.sigma
                yield bn.gamma.data
                yield bn.beta.data


def checkpoint_bytes(model: MultiModalModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    f2 = model.branches["2d"]["source"].in_width
    f3 = model.branches["3d"]["source"].in_width
    buf.write(_HEADER.pack(CKPT_VERSION, model.num_classes, model.depth, model.hidden, f2, f3))
    for t in _tensors(model):
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: MultiModalModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path, expect: dict | None = None) -> MultiModalModel:
    """Read a checkpoint; `expect` may pin header fields (K, hidden, depth, f2, f3)."""
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic at offset 0: {raw[:len(CKPT_MAGIC)]!r}")
    off = len(CKPT_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise CheckpointError(f"truncated header at offset {off}")
    version, K, depth, hidden, f2, f3 = _HEADER.unpack_from(raw, off)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version} at offset {off}")
    header = {"K": K, "depth": depth, "hidden": hidden, "f2": f2, "f3": f3}
    for key, val in (expect or {}).items():
        if header.get(key) != val:
            raise CheckpointError(f"header mismatch: {key}={header.get(key)}, expected {val}")
    off += _HEADER.size
    model = build_model(f2, f3, K, hidden, depth, check_budget=False)
    for t in _tensors(model):
        nbytes = t.size * 4
        if len(raw) < off + nbytes:
            raise CheckpointError(f"truncated payload at offset {off}: need {nbytes} bytes, have {len(raw) - off}")
        t[...] = np.frombuffer(raw, dtype="<f4", count=t.size, offset=off).reshape(t.shape)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after offset {off}")
    return model
