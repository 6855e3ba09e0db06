"""Mode and loss-weight sweeps shared by the CLI and the acceptance suite."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import VolumeSample, generate_synthetic, make_split, normalize
from .evaluation import MetricsReport, evaluate_split
from .segnet import SegNet
from .trainer import MODES, TrainConfig, run_training

log = logging.getLogger(__name__)

ABLATION_MODES = ("supervised", "mt", "fpcl", "bpcl", "mt_fpcl", "mt_bpcl", "mt_cpcl", "cpcl")
BETA_SWEEP = (1.0, 5.0, 10.0, 15.0, 20.0)


@dataclass
class Pools:
    labeled: list[VolumeSample]
    unlabeled: list[VolumeSample]
    val: list[VolumeSample]
    test: list[VolumeSample]


def synthetic_pools(seed: int, count: int = 40, dims=(48, 48, 48), labeled_fraction: float = 0.1,
                    val_count: int = 2, test_count: int = 8) -> Pools:
    """In-memory counterpart of ``cpcl synth`` followed by loading the manifest."""
    vols = {v.id: v for v in generate_synthetic(seed, count, dims)}
    split = make_split(sorted(vols), labeled_fraction, val_count, test_count, seed)

    def norm(i, keep_label=True):
        v = vols[i]
        return VolumeSample(v.id, normalize(v.image), v.label if keep_label else None, keep_label)

    return Pools([norm(i) for i in split.train_labeled],
                 [norm(i, False) for i in split.train_unlabeled],
                 [norm(i) for i in split.val], [norm(i) for i in split.test])


def train_and_evaluate(cfg: TrainConfig, pools: Pools, out_dir=None, name: str | None = None,
                       stride: int | None = None) -> tuple[dict, MetricsReport]:
    t0 = time.perf_counter()
    res = run_training(cfg, pools.labeled, pools.unlabeled, out_dir, val=pools.val)
    report = evaluate_split(SegNet(res.state.config), res.state.student, pools.test,
                            cfg.patch, stride)
    row = {"name": name or cfg.mode, "mode": cfg.mode, "beta": cfg.beta, "seed": cfg.seed,
           "t_max": cfg.t_max, "wall_s": time.perf_counter() - t0}
    for m, agg in report.aggregate().items():
        row[f"{m}_mean"] = agg["mean"]
        row[f"{m}_std"] = agg["std"]
    log.info("%s: dice %.4f", row["name"], row["dice_mean"])
    if out_dir is not None:
        report.write_jsonl(Path(out_dir) / "metrics.jsonl")
    return row, report


def mode_sweep(base: TrainConfig, pools: Pools, modes: Sequence[str] = ABLATION_MODES,
               out_dir=None) -> list[dict]:
    rows = []
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        sub = None if out_dir is None else Path(out_dir) / mode
        rows.append(train_and_evaluate(base.replace(mode=mode), pools, sub)[0])
    return rows


def beta_sweep(base: TrainConfig, pools: Pools, betas: Sequence[float] = BETA_SWEEP,
               out_dir=None) -> list[dict]:
    rows = []
    for beta in betas:
        sub = None if out_dir is None else Path(out_dir) / f"beta_{beta:g}"
        cfg = base.replace(mode="cpcl", beta=float(beta))
        rows.append(train_and_evaluate(cfg, pools, sub, name=f"beta={beta:g}")[0])
    return rows


def rows_table(rows: Sequence[dict]) -> str:
    head = (f"{'run':<14}{'Dice(%)':>16}{'Jaccard(%)':>16}{'95HD(vox)':>16}{'ASD(vox)':>14}")
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = []
        for m, scale, w in (("dice", 100, 16), ("jaccard", 100, 16), ("hd95", 1, 16), ("asd", 1, 14)):
            cells.append(f"{r[m + '_mean'] * scale:.2f} ({r[m + '_std'] * scale:.2f})".rjust(w))
        lines.append(f"{r['name']:<14}" + "".join(cells))
    return "\n".join(lines)


def write_rows(rows: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def all_finite(rows: Sequence[dict]) -> bool:
    return all(np.isfinite(v) for r in rows for k, v in r.items()
               if k.endswith(("_mean", "_std")))
