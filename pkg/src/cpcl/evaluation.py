"""Sliding-window inference, overlap and surface metrics, paired t-test, split reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .data import VolumeSample, write_volume
from .errors import ShapeError, UsageError, ValidationError
from .proto import hard_mask
from .segnet import ModelState, SegNet
from .tensor import Tensor

METRICS = ("dice", "jaccard", "hd95", "asd")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def window_starts(size: int, patch: int, stride: int) -> list[int]:
    """Origins every ``stride`` voxels, with the last window clamped to the far edge."""
    if patch > size:
        raise ValidationError(f"patch {patch} larger than volume extent {size}")
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_window_infer(model: Callable, weights: Mapping[str, Tensor], volume: np.ndarray,
                         patch: int, stride: int, batch_size: int = 4) -> np.ndarray:
    """Average softmax outputs of overlapping windows -> ``[2,D,H,W]`` probabilities."""
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim != 3:
        raise ShapeError(f"expected a [D,H,W] volume, got {vol.shape}")
    grids = [window_starts(s, patch, stride) for s in vol.shape]
    origins = [(a, b, c) for a in grids[0] for b in grids[1] for c in grids[2]]
    acc = np.zeros((2,) + vol.shape, dtype=np.float64)
    cnt = np.zeros(vol.shape, dtype=np.int32)
    with T.no_grad():
        for i in range(0, len(origins), batch_size):
            chunk = origins[i:i + batch_size]
            x = np.stack([vol[a:a + patch, b:b + patch, c:c + patch] for a, b, c in chunk])
            probs = model(weights, Tensor(x[:, None]))[2].data
            for (a, b, c), p in zip(chunk, probs):
                acc[:, a:a + patch, b:b + patch, c:c + patch] += p
                cnt[a:a + patch, b:b + patch, c:c + patch] += 1
    return (acc / cnt).astype(np.float32)


def predict_mask(model, weights, volume, patch: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    probs = sliding_window_infer(model, weights, volume, patch, stride)
    return probs, hard_mask(probs[None])[0]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(pred), np.asarray(gt)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def overlap_metrics(pred, gt) -> tuple[float, float]:
    a, b = _binary_pair(pred, gt)
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 1.0, 1.0
    inter = int((a & b).sum())
    union = sa + sb - inter
    return 2.0 * inter / (sa + sb), inter / union


_SIX = ndimage.generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-volume neighbour."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 3:
        return m & ~ndimage.binary_erosion(m, ndimage.generate_binary_structure(m.ndim, 1),
                                           border_value=0)
    return m & ~ndimage.binary_erosion(m, _SIX, border_value=0)


@dataclass(frozen=True)
class SurfaceResult:
    hd95: float
    asd: float
    undefined: bool = False


def surface_distances(pred, gt) -> np.ndarray:
    """Pooled directed boundary-to-boundary distances (A->B then B->A)."""
    a, b = _binary_pair(pred, gt)
    ba, bb = boundary(a), boundary(b)
    dist_to_b = ndimage.distance_transform_edt(~bb)
    dist_to_a = ndimage.distance_transform_edt(~ba)
    return np.concatenate([dist_to_b[ba], dist_to_a[bb]])


def surface_metrics(pred, gt) -> SurfaceResult:
    a, b = _binary_pair(pred, gt)
    if not a.any() or not b.any():
        diag = math.sqrt(sum(s * s for s in a.shape))
        return SurfaceResult(diag, diag, True)
    d = surface_distances(a, b)
    return SurfaceResult(float(np.percentile(d, 95)), float(d.mean()), False)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; all-zero differences give ``(0.0, 1.0)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValidationError("paired t-test needs at least two pairs")
    d = a - b
    if not d.any():
        return 0.0, 1.0
    sd = d.std(ddof=1)
    if sd == 0:
        return math.copysign(math.inf, d.mean()), 0.0
    t = d.mean() / (sd / math.sqrt(n))
    return float(t), float(t_two_sided_p(t, n - 1))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class CaseMetrics:
    id: str
    dice: float
    jaccard: float
    hd95: float
    asd: float
    undefined: bool = False


@dataclass
class MetricsReport:
    cases: list[CaseMetrics] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(c, metric) for c in self.cases], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def std(self, metric: str) -> float:
        return float(self.values(metric).std())

    def aggregate(self) -> dict[str, dict[str, float]]:
        return {m: {"mean": self.mean(m), "std": self.std(m)} for m in METRICS}

    def records(self) -> list[dict]:
        return [dict(vars(c)) for c in self.cases]

    def row(self) -> dict[str, str]:
        """Table cells as ``mean (std)``; Dice and Jaccard in percent."""
        cells = {}
        for m in METRICS:
            scale = 100.0 if m in ("dice", "jaccard") else 1.0
            cells[m] = f"{self.mean(m) * scale:.2f} ({self.std(m) * scale:.2f})"
        return cells

    def table(self, title: str = "") -> str:
        head = f"{'case':<12}{'Dice(%)':>10}{'Jaccard(%)':>12}{'95HD(vox)':>11}{'ASD(vox)':>10}"
        lines = [title] if title else []
        lines += [head, "-" * len(head)]
        for c in self.cases:
            flag = " *undefined" if c.undefined else ""
            lines.append(f"{c.id:<12}{c.dice * 100:>10.2f}{c.jaccard * 100:>12.2f}"
                         f"{c.hd95:>11.2f}{c.asd:>10.2f}{flag}")
        r = self.row()
        lines.append("-" * len(head))
        lines.append(f"{'mean (std)':<12}  Dice {r['dice']}  Jaccard {r['jaccard']}  "
                     f"95HD {r['hd95']}  ASD {r['asd']}")
        return "\n".join(lines)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"aggregate": self.aggregate()}) + "\n")


def case_metrics(case_id: str, pred: np.ndarray, gt: np.ndarray) -> CaseMetrics:
    dice, jac = overlap_metrics(pred, gt)
    surf = surface_metrics(pred, gt)
    return CaseMetrics(case_id, dice, jac, surf.hd95, surf.asd, surf.undefined)


def evaluate_split(model: Callable, weights: Mapping[str, Tensor],
                   samples: Sequence[VolumeSample], patch: int, stride: int | None = None,
                   dump_dir=None) -> MetricsReport:
    """Sliding-window inference, hard mask and all four metrics for every case."""
    stride = stride or max(1, patch // 2)
    for s in samples:
        if not s.labeled:
            raise UsageError(f"test sample {s.id} has no label")
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    cases = []
    for s in sorted(samples, key=lambda v: v.id):
        probs, mask = predict_mask(model, weights, s.image, patch, stride)
        if dump_dir is not None:
            write_volume(VolumeSample(s.id, probs[1], mask, True),
                         Path(dump_dir) / f"{s.id}_probs.cpv")
        cases.append(case_metrics(s.id, mask, s.label))
    return MetricsReport(cases)


def mean_val_dice(state: ModelState, samples: Sequence[VolumeSample], patch: int) -> float:
    net = SegNet(state.config)
    scores = []
    for s in samples:
        _, mask = predict_mask(net, state.student, s.image, patch, max(1, patch // 2))
        scores.append(overlap_metrics(mask, s.label)[0])
    return float(np.mean(scores)) if scores else float("nan")


def compare_reports(a: MetricsReport, b: MetricsReport) -> dict[str, dict[str, float]]:
    """Paired t-test per metric over cases shared by both reports (matched by id)."""
    ids_a = [c.id for c in a.cases]
    if ids_a != [c.id for c in b.cases]:
        raise ValidationError("reports must cover the same cases in the same order")
    out = {}
    for m in METRICS:
        t, p = paired_t_test(a.values(m), b.values(m))
        out[m] = {"mean_a": a.mean(m), "mean_b": b.mean(m), "t": t, "p": p,
                  "significant": bool(p <= 0.05)}
    return out
