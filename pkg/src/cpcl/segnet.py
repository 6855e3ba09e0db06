"""Compact 3D U-Net with an encoder feature tap, plus checkpoint I/O.

Layout for ``depth`` levels with widths ``c_i = base * 2**i``:

* encoder level i: two 3x3x3 conv + relu (level i > 0 is preceded by 2x max pool);
  the last encoder level's output is the feature tap ``F``;
* decoder level i (from depth-2 down to 0): nearest 2x upsample, 1x1x1 conv
  ``c_{i+1} -> c_i`` + relu, concat with the encoder skip, two 3x3x3 conv + relu;
* head: 1x1x1 conv ``c_0 -> classes`` followed by a channel softmax.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, FormatError, HeaderShapeError, ShapeError,
                     TruncatedError, VersionError)
from .tensor import Tensor

MAGIC = b"CPCK"
VERSION = 1
KIND_STUDENT, KIND_TEACHER, KIND_MOMENTUM = 0, 1, 2


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    classes: int = 2
    base_channels: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.classes != 2:
            raise ValueError("only binary (fg/bg) heads are supported")

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2 ** (self.depth - 1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    def param_shapes(self) -> dict[str, tuple]:
        """Parameter names and shapes in canonical (checkpoint) order."""
        c = self.widths()
        shapes: dict[str, tuple] = {}

        def conv(name, cin, cout, k):
            shapes[f"{name}.weight"] = (cout, cin, k, k, k)
            shapes[f"{name}.bias"] = (cout,)

        cin = self.in_channels
        for i, ci in enumerate(c):
            conv(f"enc{i}.conv1", cin, ci, 3)
            conv(f"enc{i}.conv2", ci, ci, 3)
            cin = ci
        for i in reversed(range(self.depth - 1)):
            conv(f"dec{i}.up", c[i + 1], c[i], 1)
            conv(f"dec{i}.conv1", 2 * c[i], c[i], 3)
            conv(f"dec{i}.conv2", c[i], c[i], 3)
        conv("head", c[0], self.classes, 1)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def decoder_param_names(config: UNetConfig) -> list[str]:
    return [n for n in config.param_shapes() if n.startswith(("dec", "head"))]


def encoder_param_names(config: UNetConfig) -> list[str]:
    return [n for n in config.param_shapes() if n.startswith("enc")]


@dataclass
class ModelState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    momentum: dict[str, np.ndarray]
    step: int = 0
    rng_state: int = 0
    config: UNetConfig = field(default_factory=UNetConfig)

    def clone(self) -> "ModelState":
        return ModelState(
            student={k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.student.items()},
            teacher={k: Tensor(v.data.copy()) for k, v in self.teacher.items()},
            momentum={k: v.copy() for k, v in self.momentum.items()},
            step=self.step,
            rng_state=self.rng_state,
            config=self.config,
        )


def _seed_to_u64(seed: int) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1, dtype=np.uint64)[0])


def init_weights(config: UNetConfig, seed: int) -> ModelState:
    """He-style uniform kernels in +-sqrt(6 / fan_in), zero biases, teacher = student."""
    rng = np.random.default_rng(seed)
    student = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            arr = np.zeros(shape, dtype=np.float32)
        student[name] = Tensor(arr, requires_grad=True)
    teacher = {k: Tensor(v.data.copy()) for k, v in student.items()}
    momentum = {k: np.zeros_like(v.data) for k, v in student.items()}
    return ModelState(student, teacher, momentum, 0, _seed_to_u64(seed), config)


def _conv(weights: Mapping[str, Tensor], name: str, h: Tensor, pad: int) -> Tensor:
    return T.conv3d(h, weights[f"{name}.weight"], weights[f"{name}.bias"], 1, pad)


def forward(config: UNetConfig, weights: Mapping[str, Tensor], x: Tensor):
    """Run the network; returns ``(F, logits, P)``."""
    if x.ndim != 5 or x.shape[1] != config.in_channels:
        raise ShapeError(f"expected input [N,{config.in_channels},D,H,W], got {x.shape}")
    if any(s % config.divisor for s in x.shape[2:]):
        raise ShapeError(
            f"spatial dims {x.shape[2:]} must be divisible by {config.divisor}")
    skips = []
    h = x
    for i in range(config.depth):
        if i:
            h = T.max_pool3d(h)
        h = T.relu(_conv(weights, f"enc{i}.conv1", h, 1))
        h = T.relu(_conv(weights, f"enc{i}.conv2", h, 1))
        skips.append(h)
    feat = h
    for i in reversed(range(config.depth - 1)):
        h = T.upsample_nearest3d(h, 2)
        h = T.relu(_conv(weights, f"dec{i}.up", h, 0))
        h = T.concat([skips[i], h], axis=1)
        h = T.relu(_conv(weights, f"dec{i}.conv1", h, 1))
        h = T.relu(_conv(weights, f"dec{i}.conv2", h, 1))
    logits = _conv(weights, "head", h, 0)
    return feat, logits, T.softmax(logits, axis=1)


class SegNet:
    """Callable bundle of a config and the forward function."""

    def __init__(self, config: UNetConfig | None = None):
        self.config = config or UNetConfig()

    def __call__(self, weights, x):
        return forward(self.config, weights, x)

    def probs(self, weights, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return forward(self.config, weights, Tensor(x))[2].data


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_section(kind: int, entries: Mapping[str, np.ndarray]) -> bytes:
    out = [struct.pack("<BI", kind, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(state: ModelState, path) -> None:
    sections = [
        (KIND_STUDENT, {k: v.data for k, v in state.student.items()}),
        (KIND_TEACHER, {k: v.data for k, v in state.teacher.items()}),
        (KIND_MOMENTUM, state.momentum),
    ]
    blob = [MAGIC, struct.pack("<IQQI", VERSION, state.step, state.rng_state, len(sections))]
    blob += [_pack_section(k, e) for k, e in sections]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(blob))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(self.path, self.pos + n, len(self.buf))
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, config: UNetConfig | None = None) -> ModelState:
    """Read a checkpoint; raises a :class:`FormatError` subclass on any defect."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, step, rng_state, n_sections = r.unpack("<IQQI")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    sections: dict[int, dict[str, np.ndarray]] = {}
    for _ in range(n_sections):
        kind, count = r.unpack("<BI")
        if kind not in (KIND_STUDENT, KIND_TEACHER, KIND_MOMENTUM) or kind in sections:
            raise HeaderShapeError(f"{path}: unexpected section kind {kind}")
        entries = {}
        for _ in range(count):
            (name_len,) = r.unpack("<H")
            name = r.take(name_len).decode("utf-8")
            (ndim,) = r.unpack("<B")
            dims = r.unpack(f"<{ndim}I") if ndim else ()
            n = int(np.prod(dims)) if dims else 1
            payload = r.take(4 * n)
            entries[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        sections[kind] = entries
    if r.pos != len(r.buf):
        raise HeaderShapeError(
            f"{path}: {len(r.buf) - r.pos} trailing bytes after declared sections")
    if set(sections) != {KIND_STUDENT, KIND_TEACHER, KIND_MOMENTUM}:
        raise HeaderShapeError(f"{path}: missing sections, found kinds {sorted(sections)}")

    student = sections[KIND_STUDENT]
    ref = {k: v.shape for k, v in student.items()}
    for kind in (KIND_TEACHER, KIND_MOMENTUM):
        got = {k: v.shape for k, v in sections[kind].items()}
        if got != ref:
            raise HeaderShapeError(f"{path}: section {kind} does not match student shapes")
    if config is None:
        config = _infer_config(student)
    expected = config.param_shapes()
    if {k: tuple(v) for k, v in expected.items()} != ref or list(expected) != list(ref):
        raise HeaderShapeError(f"{path}: parameter shapes do not match {config}")
    return ModelState(
        student={k: Tensor(v, requires_grad=True) for k, v in student.items()},
        teacher={k: Tensor(v) for k, v in sections[KIND_TEACHER].items()},
        momentum=dict(sections[KIND_MOMENTUM]),
        step=step,
        rng_state=rng_state,
        config=config,
    )


def _infer_config(student: Mapping[str, np.ndarray]) -> UNetConfig:
    try:
        w0 = student["enc0.conv1.weight"]
        depth = sum(1 for k in student if k.startswith("enc") and k.endswith("conv1.weight"))
        return UNetConfig(in_channels=w0.shape[1], base_channels=w0.shape[0], depth=depth)
    except (KeyError, IndexError, ValueError) as exc:
        raise HeaderShapeError(f"cannot infer network layout from checkpoint: {exc}") from None


def states_equal(a: ModelState, b: ModelState) -> bool:
    """Bitwise equality of every stored field."""
    if (a.step, a.rng_state) != (b.step, b.rng_state):
        return False
    for x, y in ((a.student, b.student), (a.teacher, b.teacher)):
        if list(x) != list(y):
            return False
        if any(x[k].data.tobytes() != y[k].data.tobytes() for k in x):
            return False
    if list(a.momentum) != list(b.momentum):
        return False
    return all(a.momentum[k].tobytes() == b.momentum[k].tobytes() for k in a.momentum)


__all__ = [
    "UNetConfig", "ModelState", "SegNet", "forward", "init_weights",
    "save_checkpoint", "load_checkpoint", "states_equal", "FormatError",
]
