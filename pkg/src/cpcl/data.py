"""Synthetic volumes, CPV1 volume files, normalization, augmentation and batching."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (BadMagicError, ConfigError, DataError, HeaderShapeError,
                     TruncatedError, ValidationError, VersionError)

MAGIC = b"CPV1"
VERSION = 1
_HEADER = struct.Struct("<4sIB3I")


@dataclass
class VolumeSample:
    id: str
    image: np.ndarray
    label: np.ndarray | None = None
    labeled: bool = False

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.uint8)
            if self.label.shape != self.image.shape:
                raise ValidationError(
                    f"{self.id}: label dims {self.label.shape} != image dims {self.image.shape}")
        if self.labeled != (self.label is not None):
            raise ValidationError(f"{self.id}: labeled flag must match label presence")

    @property
    def dims(self) -> tuple:
        return self.image.shape

    def unlabeled(self) -> "VolumeSample":
        return VolumeSample(self.id, self.image, None, False)


@dataclass
class DatasetSplit:
    train_labeled: list[str] = field(default_factory=list)
    train_unlabeled: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    labeled_fraction: float = 0.0

    def groups(self) -> dict[str, list[str]]:
        return {"train_labeled": self.train_labeled, "train_unlabeled": self.train_unlabeled,
                "val": self.val, "test": self.test}

    def all_ids(self) -> list[str]:
        return [i for ids in self.groups().values() for i in ids]


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _bias_field(rng: np.random.Generator, grid: np.ndarray, dims, amplitude: float) -> np.ndarray:
    field_ = np.zeros(dims)
    for _ in range(3):
        freq = rng.uniform(0.3, 1.2, size=3) * rng.choice([-1, 1], size=3)
        phase = rng.uniform(0, 2 * np.pi)
        proj = sum(freq[a] * grid[a] / dims[a] for a in range(3))
        field_ += np.cos(2 * np.pi * proj + phase)
    return amplitude * field_ / 3.0


def generate_one(rng: np.random.Generator, dims, sample_id: str,
                 noise_sigma: float = 0.2, bias_amplitude: float = 1.0) -> VolumeSample:
    dims = tuple(int(d) for d in dims)
    grid = np.indices(dims, dtype=np.float64)
    label = np.zeros(dims, dtype=bool)
    image = np.zeros(dims, dtype=np.float64)
    for _ in range(int(rng.integers(1, 4))):
        semi = rng.uniform(0.08, 0.2, size=3) * np.array(dims)
        margin = semi.max() + 1
        centre = np.array([rng.uniform(margin, d - 1 - margin) for d in dims])
        rot = _random_rotation(rng)
        offs = (grid - centre[:, None, None, None]).reshape(3, -1)
        local = rot.T @ offs
        inside = (((local / semi[:, None]) ** 2).sum(axis=0) <= 1.0).reshape(dims)
        contrast = rng.uniform(0.5, 1.5)
        image[inside & ~label] += contrast
        label |= inside
    image += _bias_field(rng, grid, dims, bias_amplitude)
    image += rng.normal(0.0, noise_sigma, size=dims)
    return VolumeSample(sample_id, image.astype(np.float32), label.astype(np.uint8), True)


def generate_synthetic(seed: int, count: int, dims=(48, 48, 48)) -> list[VolumeSample]:
    """``count`` labeled volumes, each with 1-3 random ellipsoids on a biased, noisy background."""
    if min(dims) < 16:
        raise ValidationError(f"dims must be >= 16 per axis, got {dims}")
    children = np.random.SeedSequence(seed).spawn(count)
    return [generate_one(np.random.default_rng(ss), dims, f"case{i:04d}")
            for i, ss in enumerate(children)]


# ---------------------------------------------------------------------------
# CPV1 volume files
# ---------------------------------------------------------------------------

def write_volume(sample: VolumeSample, path) -> None:
    d, h, w = sample.image.shape
    parts = [_HEADER.pack(MAGIC, VERSION, int(sample.labeled), d, h, w),
             np.ascontiguousarray(sample.image, dtype="<f4").tobytes()]
    if sample.labeled:
        parts.append(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_volume(path, sample_id: str | None = None) -> VolumeSample:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError(path, _HEADER.size, len(buf))
    _, version, has_label, d, h, w = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionError(f"{path}: volume version {version}, expected {VERSION}")
    if has_label not in (0, 1):
        raise HeaderShapeError(f"{path}: has_label byte is {has_label}")
    n = d * h * w
    expected = _HEADER.size + 4 * n + (n if has_label else 0)
    if len(buf) < expected:
        raise TruncatedError(path, expected, len(buf))
    if len(buf) > expected:
        raise HeaderShapeError(f"{path}: {len(buf) - expected} bytes beyond declared payload")
    off = _HEADER.size
    image = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(d, h, w)
    label = None
    if has_label:
        label = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + 4 * n).reshape(d, h, w).copy()
    return VolumeSample(sample_id or path.stem, image, label, bool(has_label))


# ---------------------------------------------------------------------------
# splits and manifests
# ---------------------------------------------------------------------------

def make_split(ids: Sequence[str], labeled_fraction: float, val_count: int,
               test_count: int, seed: int) -> DatasetSplit:
    ids = list(ids)
    if val_count + test_count >= len(ids):
        raise ConfigError("val_count + test_count leaves no training volumes")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test = sorted(shuffled[:test_count])
    val = sorted(shuffled[test_count:test_count + val_count])
    train = shuffled[test_count + val_count:]
    n_lab = max(1, int(round(labeled_fraction * len(train))))
    return DatasetSplit(sorted(train[:n_lab]), sorted(train[n_lab:]), val, test,
                        labeled_fraction)


def write_manifest(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rec["id"], rec["path"], rec["labeled"], rec["split"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{n}: malformed manifest record ({exc})") from None
        records.append(rec)
    return records


def split_from_manifest(records: Sequence[dict]) -> DatasetSplit:
    split = DatasetSplit()
    groups = split.groups()
    for rec in records:
        if rec["split"] not in groups:
            raise DataError(f"unknown split tag {rec['split']!r} for {rec['id']}")
        groups[rec["split"]].append(rec["id"])
    n_l, n_u = len(split.train_labeled), len(split.train_unlabeled)
    split.labeled_fraction = n_l / (n_l + n_u) if n_l + n_u else 0.0
    return split


def load_group(records: Sequence[dict], group: str, root=None) -> list[VolumeSample]:
    out = []
    for rec in records:
        if rec["split"] != group:
            continue
        p = Path(rec["path"])
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        s = read_volume(p, rec["id"])
        out.append(VolumeSample(s.id, normalize(s.image), s.label, s.labeled))
    return out


# ---------------------------------------------------------------------------
# preprocessing and augmentation
# ---------------------------------------------------------------------------

def normalize(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit population variance."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    if not std > 0:
        raise ValidationError("cannot normalize a constant image")
    return ((x - x.mean()) / std).astype(np.float32)


@dataclass(frozen=True)
class AugmentParams:
    origin: tuple
    flips: tuple = (False, False, False)
    rot_k: int = 0
    rot_axes: tuple = (0, 1)


_ROT_PLANES = ((1, 2), (0, 2), (0, 1))


def draw_augment(rng: np.random.Generator, dims, patch: int) -> AugmentParams:
    if any(patch > d for d in dims):
        raise ValidationError(f"patch {patch} larger than volume {tuple(dims)}")
    origin = tuple(int(rng.integers(0, d - patch + 1)) for d in dims)
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    rot_k = int(rng.integers(0, 4))
    rot_axes = _ROT_PLANES[int(rng.integers(0, 3))]
    return AugmentParams(origin, flips, rot_k, rot_axes)


def apply_augment(vol: np.ndarray, params: AugmentParams, patch: int) -> np.ndarray:
    o = params.origin
    out = vol[o[0]:o[0] + patch, o[1]:o[1] + patch, o[2]:o[2] + patch]
    for ax, f in enumerate(params.flips):
        if f:
            out = np.flip(out, axis=ax)
    if params.rot_k:
        out = np.rot90(out, params.rot_k, axes=params.rot_axes)
    return np.ascontiguousarray(out)


def augment(sample: VolumeSample, rng: np.random.Generator, patch: int,
            params: AugmentParams | None = None) -> VolumeSample:
    """Random crop, per-axis flips and a 90-degree rotation, shared by image and label."""
    if params is None:
        params = draw_augment(rng, sample.dims, patch)
    elif any(patch > d for d in sample.dims):
        raise ValidationError(f"patch {patch} larger than volume {sample.dims}")
    image = apply_augment(sample.image, params, patch)
    label = apply_augment(sample.label, params, patch) if sample.labeled else None
    return VolumeSample(sample.id, image, label, sample.labeled)


@dataclass
class Batch:
    x_l: np.ndarray
    y_l: np.ndarray
    x_u: np.ndarray | None
    labeled_ids: list[str]
    unlabeled_ids: list[str]


def step_generators(rng_state: int) -> tuple[np.random.Generator, np.random.Generator,
                                             np.random.Generator, int]:
    """Independent labeled / unlabeled / noise streams plus the next chain state."""
    ss = np.random.SeedSequence(int(rng_state))
    lab, unl, noise, nxt = ss.spawn(4)
    next_state = int(nxt.generate_state(1, dtype=np.uint64)[0])
    return (np.random.default_rng(lab), np.random.default_rng(unl),
            np.random.default_rng(noise), next_state)


def sample_batch(labeled: Sequence[VolumeSample], unlabeled: Sequence[VolumeSample],
                 rng_l: np.random.Generator, rng_u: np.random.Generator | None,
                 n_labeled: int, n_unlabeled: int, patch: int,
                 use_unlabeled: bool = True) -> Batch:
    """Draw with replacement from both pools and augment each draw."""
    if not labeled:
        raise ConfigError("labeled pool is empty")
    picks = [labeled[i] for i in rng_l.integers(0, len(labeled), size=n_labeled)]
    aug_l = [augment(s, rng_l, patch) for s in picks]
    x_l = np.stack([s.image for s in aug_l])[:, None]
    y_l = np.stack([s.label for s in aug_l])
    x_u, u_ids = None, []
    if use_unlabeled:
        if not unlabeled:
            raise ConfigError("consistency modes need a non-empty unlabeled pool")
        upicks = [unlabeled[i] for i in rng_u.integers(0, len(unlabeled), size=n_unlabeled)]
        aug_u = [augment(s.unlabeled() if s.labeled else s, rng_u, patch) for s in upicks]
        x_u = np.stack([s.image for s in aug_u])[:, None]
        u_ids = [s.id for s in upicks]
    return Batch(x_l, y_l, x_u, [s.id for s in picks], u_ids)
