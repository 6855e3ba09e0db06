"""Prototype extraction by masked average pooling and cosine-metric prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .tensor import Tensor

NORM_EPS = 1e-8


@dataclass
class PrototypeSet:
    p_fg: Tensor
    p_bg: Tensor
    fg_support_count: int
    bg_support_count: int

    @property
    def channels(self) -> int:
        return self.p_fg.shape[0]

    def detach(self) -> "PrototypeSet":
        return PrototypeSet(T.detach(self.p_fg), T.detach(self.p_bg),
                            self.fg_support_count, self.bg_support_count)


def _as_mask(mask) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("mask must contain only 0 and 1")
    return m.astype(bool)


def _class_weights(member: np.ndarray, dtype) -> tuple[np.ndarray, int]:
    """Per-voxel pooling weights: 1/|class_k| per image, averaged over supporting images."""
    k = member.shape[0]
    counts = member.reshape(k, -1).sum(axis=1)
    support = counts > 0
    n_support = int(support.sum())
    w = np.zeros(member.shape, dtype=np.float64)
    for i in np.flatnonzero(support):
        w[i] = member[i] / (counts[i] * n_support)
    return w.astype(dtype)[:, None], n_support


def masked_average_pool(feat: Tensor, mask) -> PrototypeSet:
    """Foreground/background prototypes of ``feat[K,C,d,h,w]`` under ``mask[K,D,H,W]``.

    The feature map is resized to the mask grid first. Images without any voxel
    of a class do not contribute to that class's prototype; a class absent from
    the whole batch yields the zero vector.
    """
    m = _as_mask(mask)
    if feat.ndim != 5 or m.ndim != 4 or m.shape[0] != feat.shape[0]:
        raise ShapeError(f"feature map {feat.shape} incompatible with mask {m.shape}")
    up = T.trilinear_upsample(feat, m.shape[1:])
    w_fg, n_fg = _class_weights(m, feat.dtype)
    w_bg, n_bg = _class_weights(~m, feat.dtype)
    p_fg = T.tsum(T.mul(up, w_fg), axis=(0, 2, 3, 4))
    p_bg = T.tsum(T.mul(up, w_bg), axis=(0, 2, 3, 4))
    return PrototypeSet(p_fg, p_bg, n_fg, n_bg)


def cosine_map(up: Tensor, proto: Tensor, feat_norm: Tensor | None = None) -> Tensor:
    """Voxelwise cosine between ``up[K,C,D,H,W]`` and a prototype vector -> ``[K,1,D,H,W]``."""
    c = up.shape[1]
    p = T.reshape(proto, (1, c, 1, 1, 1))
    dot = T.tsum(T.mul(up, p), axis=1, keepdims=True)
    if feat_norm is None:
        feat_norm = T.l2_norm(up, axis=1, eps=NORM_EPS)
    p_norm = T.l2_norm(p, axis=1, eps=NORM_EPS)
    return T.div(dot, T.mul(feat_norm, p_norm))


def proto_predict(feat: Tensor, protos: PrototypeSet, alpha: float, out_dims,
                  distance: str = "one_minus_cos") -> Tensor:
    """Class probabilities ``[K,2,D,H,W]`` (channel 1 = foreground) from prototype distances.

    ``distance`` selects ``1 - cos`` or ``-cos``; both give the same probabilities.
    """
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    c = feat.shape[1]
    for p in (protos.p_fg, protos.p_bg):
        if p.ndim != 1 or p.shape[0] == 0:
            raise ValidationError("prototypes must be non-empty vectors")
        if p.shape[0] != c:
            raise ShapeError(f"prototype length {p.shape[0]} != feature channels {c}")
    # the head runs in f64: alpha amplifies f32 rounding in the cosines past 1e-6
    up = T.trilinear_upsample(T.cast(feat, np.float64), out_dims)
    f_norm = T.l2_norm(up, axis=1, eps=NORM_EPS)
    logits = []
    for p in (protos.p_bg, protos.p_fg):
        cos = cosine_map(up, T.cast(p, np.float64), f_norm)
        if distance == "one_minus_cos":
            dist = T.sub(1.0, cos)
        elif distance == "neg_cos":
            dist = T.mul(cos, -1.0)
        else:
            raise ValidationError(f"unknown distance {distance!r}")
        logits.append(T.mul(dist, -float(alpha)))
    return T.cast(T.softmax(T.concat(logits, axis=1), axis=1), feat.dtype)


def hard_mask(probs) -> np.ndarray:
    """Argmax over the class axis of ``[K,2,...]``; exact ties go to background."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (p[:, 1] > p[:, 0]).astype(np.uint8)


def one_hot(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``[K,...]`` binary mask -> ``[K,2,...]`` one-hot (channel 0 = background)."""
    m = np.asarray(mask).astype(dtype)
    return np.stack([1 - m, m], axis=1)
