"""Synthetic two-modality domain-shift scenarios and the MMDS1 file format.

Randomness comes exclusively from numpy's Philox4x64-10 counter-based bit
generator keyed by (seed, stream id), so a scenario reproduces bit-for-bit on
any platform. Stream ids:

    0                  class-mean geometry (shared by both domains)
    1                  target shift parameters
    2 << 32 | i        frame with global index i

Global frame indices are laid out as [source | source-test | target], so the
three splits never share draws. A target frame is the source-domain frame at
the same index passed through the target shift.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

DS_MAGIC = b"MMDS1"
DS_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def philox(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), stream & (2**64 - 1)]))


@dataclass
class ModalityShift:
    scale: float = 1.0          # mean of the per-feature scale a_M
    scale_jitter: float = 0.0   # a_M ~ scale * exp(jitter * N(0,1))
    offset: float = 0.0         # std of the per-feature offset b_M
    noise: float = 1.0          # multiplier on the within-class noise
    mix: float = 0.0            # strength of a random linear mixing of features
    class_shift: float = 0.0    # std of a per-class change of the class mean
    confuse: float = 0.0        # fraction by which each class mean moves toward a partner class

    def __post_init__(self):
        if self.scale <= 0 or self.noise <= 0:
            raise ValueError("scale and noise multipliers must be positive")


@dataclass
class ScenarioSpec:
    K: int = 6
    f2: int = 16
    f3: int = 12
    n_points: int = 256
    n_source: int = 200
    n_target: int = 100
    n_source_test: int = 40
    separation2d: float = 1.0
    separation3d: float = 1.0
    shift2d: ModalityShift = field(default_factory=ModalityShift)
    shift3d: ModalityShift = field(default_factory=ModalityShift)
    corrupt2d: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.shift2d, dict):
            self.shift2d = ModalityShift(**self.shift2d)
        if isinstance(self.shift3d, dict):
            self.shift3d = ModalityShift(**self.shift3d)
        for name in ("K", "f2", "f3", "n_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.corrupt2d <= 1.0:
            raise ValueError("corrupt2d must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, ScenarioSpec] = {
    # both sensors change: class means drift toward each other, extra noise
    # and a feature offset
    "sensor-swap": ScenarioSpec(
        shift2d=ModalityShift(offset=0.5, noise=1.2, confuse=0.3),
        shift3d=ModalityShift(offset=0.5, noise=1.2, confuse=0.3),
    ),
    # camera degrades heavily, LiDAR unchanged
    "day-night": ScenarioSpec(
        shift2d=ModalityShift(scale=0.7, offset=0.5, noise=1.2, confuse=0.3),
        corrupt2d=0.6,
    ),
    # stronger change on both
    "syn-real": ScenarioSpec(
        shift2d=ModalityShift(scale_jitter=0.3, offset=0.8, noise=1.3, confuse=0.35),
        shift3d=ModalityShift(scale_jitter=0.3, offset=0.8, noise=1.3, confuse=0.35),
    ),
}


def preset(name: str, **overrides) -> ScenarioSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class MultiModalBatch:
    x2d: np.ndarray
    x3d: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        n = self.x2d.shape[0]
        if self.x3d.shape[0] != n or (self.labels is not None and self.labels.shape[0] != n):
            raise ValueError("x2d, x3d and labels must have equal row counts")

    def __len__(self):
        return self.x2d.shape[0]


@dataclass
class _World:
    mean2d: np.ndarray
    mean3d: np.ndarray
    a2d: np.ndarray
    b2d: np.ndarray
    a3d: np.ndarray
    b3d: np.ndarray
    mix2d: np.ndarray
    mix3d: np.ndarray
    delta2d: np.ndarray
    delta3d: np.ndarray


def _world(spec: ScenarioSpec) -> _World:
    g = philox(spec.seed, 0)
    mean2d = g.standard_normal((spec.K, spec.f2)) * spec.separation2d
    mean3d = g.standard_normal((spec.K, spec.f3)) * spec.separation3d
    h = philox(spec.seed, 1)

    def affine(s: ModalityShift, f: int):
        a = s.scale * np.exp(s.scale_jitter * h.standard_normal(f))
        b = s.offset * h.standard_normal(f)
        return a, b

    a2d, b2d = affine(spec.shift2d, spec.f2)
    a3d, b3d = affine(spec.shift3d, spec.f3)

    def mixing(s: ModalityShift, f: int):
        return np.eye(f) + s.mix * h.standard_normal((f, f)) / np.sqrt(f)

    mix2d, mix3d = mixing(spec.shift2d, spec.f2), mixing(spec.shift3d, spec.f3)
    delta2d = spec.shift2d.class_shift * h.standard_normal((spec.K, spec.f2))
    delta3d = spec.shift3d.class_shift * h.standard_normal((spec.K, spec.f3))

    def partner_pull(s: ModalityShift, means: np.ndarray):
        # partners form one random cycle over the classes, drawn per modality
        order = h.permutation(spec.K)
        partner = np.empty(spec.K, np.int64)
        partner[order] = np.roll(order, -1)
        return s.confuse * (means[partner] - means)

    delta2d = delta2d + partner_pull(spec.shift2d, mean2d)
    delta3d = delta3d + partner_pull(spec.shift3d, mean3d)
    return _World(mean2d, mean3d, a2d, b2d, a3d, b3d, mix2d, mix3d, delta2d, delta3d)


def frame_offset(spec: ScenarioSpec, split: str) -> int:
    return {"source": 0, "source-test": spec.n_source, "target": spec.n_source + spec.n_source_test}[split]


def generate_frame(spec: ScenarioSpec, domain: str, index: int, world: _World | None = None) -> MultiModalBatch:
    """Frame with global index `index`, rendered in `domain` ('source' or 'target')."""
    w = world or _world(spec)
    g = philox(spec.seed, (2 << 32) | index)
    n = spec.n_points
    y = g.integers(0, spec.K, size=n)
    e2 = g.standard_normal((n, spec.f2))
    e3 = g.standard_normal((n, spec.f3))
    junk = g.standard_normal((n, spec.f2))
    if domain == "target":
        x2 = w.mean2d[y] + w.delta2d[y] + spec.shift2d.noise * e2
        x3 = w.mean3d[y] + w.delta3d[y] + spec.shift3d.noise * e3
        if spec.corrupt2d > 0:
            # pull 2D features toward class-independent noise of matched spread
            spread = np.sqrt(spec.separation2d**2 + spec.shift2d.noise**2)
            x2 = (1 - spec.corrupt2d) * x2 + spec.corrupt2d * spread * junk
        x2 = w.a2d * (x2 @ w.mix2d) + w.b2d
        x3 = w.a3d * (x3 @ w.mix3d) + w.b3d
    else:
        x2 = w.mean2d[y] + e2
        x3 = w.mean3d[y] + e3
    return MultiModalBatch(x2.astype(np.float32), x3.astype(np.float32), y.astype(np.int32))


def generate(spec: ScenarioSpec, split: str) -> list[MultiModalBatch]:
    """All frames of one split: 'source', 'source-test' or 'target'."""
    count = {"source": spec.n_source, "source-test": spec.n_source_test, "target": spec.n_target}[split]
    domain = "target" if split == "target" else "source"
    start = frame_offset(spec, split)
    w = _world(spec)
    return [generate_frame(spec, domain, start + i, w) for i in range(count)]


# --- MMDS1 ------------------------------------------------------------------
# magic "MMDS1", then <u16 version, u32 K, u32 f2, u32 f3, u32 frames,
# u32 points/frame>, then per frame: x2d (points*f2 float32), x3d (points*f3
# float32), labels (points int32), all little-endian.

_DS_HEADER = struct.Struct("<HIIIII")


def dataset_bytes(frames: list[MultiModalBatch], K: int) -> bytes:
    if not frames:
        f2 = f3 = n = 0
    else:
        n, f2 = frames[0].x2d.shape
        f3 = frames[0].x3d.shape[1]
    buf = io.BytesIO()
    buf.write(DS_MAGIC)
    buf.write(_DS_HEADER.pack(DS_VERSION, K, f2, f3, len(frames), n))
    for fr in frames:
        if fr.x2d.shape != (n, f2) or fr.x3d.shape != (n, f3):
            raise ValueError("all frames must share one shape")
        labels = fr.labels if fr.labels is not None else np.full(n, -1)
        buf.write(np.ascontiguousarray(fr.x2d, "<f4").tobytes())
        buf.write(np.ascontiguousarray(fr.x3d, "<f4").tobytes())
        buf.write(np.ascontiguousarray(labels, "<i4").tobytes())
    return buf.getvalue()


def save(frames: list[MultiModalBatch], path, K: int) -> None:
    Path(path).write_bytes(dataset_bytes(frames, K))


def load(path) -> tuple[list[MultiModalBatch], int]:
    """Returns (frames, K)."""
    return from_bytes(Path(path).read_bytes())


def from_bytes(raw: bytes) -> tuple[list[MultiModalBatch], int]:
    if raw[: len(DS_MAGIC)] != DS_MAGIC:
        raise DatasetFormatError(f"bad magic at offset 0: {raw[:len(DS_MAGIC)]!r}")
    off = len(DS_MAGIC)
    if len(raw) < off + _DS_HEADER.size:
        raise DatasetFormatError(f"truncated header at offset {off}")
    version, K, f2, f3, count, n = _DS_HEADER.unpack_from(raw, off)
    if version != DS_VERSION:
        raise DatasetFormatError(f"unsupported version {version} at offset {off}")
    off += _DS_HEADER.size
    frame_bytes = 4 * n * (f2 + f3 + 1)
    if len(raw) != off + count * frame_bytes:
        have = (len(raw) - off) // frame_bytes if frame_bytes else 0
        raise DatasetFormatError(
            f"payload size mismatch at offset {off + have * frame_bytes}: header declares {count} frames "
            f"of {frame_bytes} bytes, file holds {len(raw) - off} bytes"
        )
    frames = []
    for _ in range(count):
        x2 = np.frombuffer(raw, "<f4", n * f2, off).reshape(n, f2).astype(np.float32)
        off += 4 * n * f2
        x3 = np.frombuffer(raw, "<f4", n * f3, off).reshape(n, f3).astype(np.float32)
        off += 4 * n * f3
        y = np.frombuffer(raw, "<i4", n, off).astype(np.int32)
        off += 4 * n
        frames.append(MultiModalBatch(x2, x3, y))
    return frames, K
