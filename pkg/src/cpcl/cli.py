"""Command-line entry points: ``synth``, ``train``, ``eval``, ``compare``, ``ablate``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import plotting
from .config import RunConfig, defaults_help, dump_config, load_config
from .data import (VolumeSample, generate_synthetic, load_group, make_split, read_manifest,
                   write_manifest, write_volume)
from .errors import (ConfigError, DataError, FormatError, NumericalError, UsageError,
                     ValidationError)
from .evaluation import compare_reports, evaluate_split
from .experiments import (ABLATION_MODES, BETA_SWEEP, Pools, beta_sweep, mode_sweep,
                          rows_table, write_rows)
from .segnet import SegNet, load_checkpoint
from .trainer import run_training

log = logging.getLogger("cpcl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _resolve(cfg: RunConfig, args) -> RunConfig:
    if args.out is not None:
        cfg.data.out_dir = args.out
    return cfg


def _config(args) -> RunConfig:
    return _resolve(load_config(args.config, seed=args.seed), args)


def _records(manifest: Path):
    return read_manifest(manifest), manifest.parent


def _pools(cfg: RunConfig, need_unlabeled: bool = True) -> Pools:
    records, root = _records(cfg.data.manifest_path())
    pools = Pools(load_group(records, "train_labeled", root),
                  load_group(records, "train_unlabeled", root) if need_unlabeled else [],
                  load_group(records, "val", root), load_group(records, "test", root))
    if not pools.labeled:
        raise DataError("manifest has no train_labeled entries")
    return pools


def cmd_synth(args) -> int:
    cfg = _config(args)
    d = cfg.data
    root = Path(args.out) if args.out is not None else Path(d.data_dir)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    seed = cfg.train.seed
    vols = generate_synthetic(seed, d.count, d.dims)
    split = make_split([v.id for v in vols], d.labeled_fraction, d.val_count, d.test_count, seed)
    tag = {i: g for g, ids in split.groups().items() for i in ids}
    records = []
    for v in vols:
        rel = Path("volumes") / f"{v.id}.cpv"
        out = v if tag[v.id] != "train_unlabeled" else VolumeSample(v.id, v.image)
        write_volume(out, root / rel)
        records.append({"id": v.id, "path": str(rel), "labeled": out.labeled, "split": tag[v.id]})
    write_manifest(records, root / "manifest.jsonl")
    plotting.plot_volume_preview(vols, root / "preview.png")
    print(f"wrote {len(vols)} volumes to {root} "
          f"({len(split.train_labeled)} labeled / {len(split.train_unlabeled)} unlabeled / "
          f"{len(split.val)} val / {len(split.test)} test)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    tc = cfg.train
    pools = _pools(cfg, need_unlabeled=tc.uses_unlabeled)
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    res = run_training(tc, pools.labeled, pools.unlabeled, out, val=pools.val, resume=args.resume)
    steps = [json.loads(l) for l in (out / "steps.jsonl").read_text().splitlines() if l]
    val = [json.loads(l) for l in (out / "val.jsonl").read_text().splitlines() if l]
    plotting.plot_training_curves(steps, val, out / "training_curves.png")
    last = res.reports[-1] if res.reports else None
    print(f"finished at step {res.state.step}; checkpoint {res.checkpoint}")
    if last is not None:
        print(f"final loss {last.loss_total:.4f} (L_s {last.loss_s:.4f})")
    return EXIT_OK


def _weights(state, which: str):
    return state.teacher if which == "teacher" else state.student


def cmd_eval(args) -> int:
    cfg = _config(args)
    pools = _pools(cfg, need_unlabeled=False)
    state = load_checkpoint(args.checkpoint)
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump = out / "probs" if args.dump_probs else None
    report = evaluate_split(SegNet(state.config), _weights(state, args.weights), pools.test,
                            cfg.train.patch, args.stride, dump_dir=dump)
    report.write_jsonl(out / "metrics.jsonl")
    table = report.table(f"{args.checkpoint} ({args.weights})")
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    plotting.plot_metrics(report, out / "metrics.png")
    print(table)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    pools = _pools(cfg, need_unlabeled=False)
    reports = []
    for ck in (args.checkpoint_a, args.checkpoint_b):
        state = load_checkpoint(ck)
        reports.append(evaluate_split(SegNet(state.config), _weights(state, args.weights),
                                      pools.test, cfg.train.patch, args.stride))
    stats = compare_reports(*reports)
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"A = {args.checkpoint_a}", f"B = {args.checkpoint_b}",
             f"{'metric':<9}{'A':>10}{'B':>10}{'t':>10}{'p':>10}"]
    for m, s in stats.items():
        scale = 100 if m in ("dice", "jaccard") else 1
        star = " *" if s["significant"] else ""
        lines.append(f"{m:<9}{s['mean_a'] * scale:>10.2f}{s['mean_b'] * scale:>10.2f}"
                     f"{s['t']:>10.3f}{s['p']:>10.4f}{star}")
    lines.append("* two-sided paired t-test, p <= 0.05")
    with open(out / "compare.jsonl", "w", encoding="utf-8") as fh:
        for tag, rep in zip("AB", reports):
            for rec in rep.records():
                fh.write(json.dumps({"checkpoint": tag, **rec}) + "\n")
        for m, s in stats.items():
            fh.write(json.dumps({"metric": m, **s}) + "\n")
    (out / "compare.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plotting.plot_compare(*reports, out / "compare.png")
    print("\n".join(lines))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    pools = _pools(cfg)
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.sweep in ("modes", "all"):
        modes = args.modes.split(",") if args.modes else ABLATION_MODES
        rows += mode_sweep(cfg.train, pools, modes, out / "modes")
    if args.sweep in ("beta", "all"):
        rows += beta_sweep(cfg.train, pools, BETA_SWEEP, out / "betas")
    write_rows(rows, out / "ablation.jsonl")
    table = rows_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    plotting.plot_ablation(rows, out / "ablation.png")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides out_dir; data_dir for synth)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="cpcl", description="Cyclic prototype consistency learning on volumetric data.",
        epilog=defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_,
                           epilog=defaults_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a seeded synthetic dataset, manifest and split")
    p = add("train", cmd_train, "train in the configured mode")
    p.add_argument("--resume", help="checkpoint to resume from")
    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint on the test split"),):
        p = add(name, func, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dump-probs", action="store_true",
                       help="write probability maps and hard masks as CPV1 volumes")
    p = add("compare", cmd_compare, "per-case metrics and paired t-tests for two checkpoints")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    for p in (sub.choices["eval"], sub.choices["compare"]):
        p.add_argument("--weights", choices=("student", "teacher"), default="student")
        p.add_argument("--stride", type=int, default=None,
                       help="sliding-window stride (default patch/2)")
    p = add("ablate", cmd_ablate, "mode sweep and/or loss-weight sweep with a combined table")
    p.add_argument("--sweep", choices=("modes", "beta", "all"), default="all")
    p.add_argument("--modes", help="comma-separated subset of modes")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
