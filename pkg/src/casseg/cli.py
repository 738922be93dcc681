"""Command-line pipeline: synth-data, pretrain, cluster, finetune, active,
evaluate, report, and the umbrella experiment command."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import experiment as xp
from .dataio import SyntheticConfig, ValidationError, generate_synthetic, load_dataset, save_dataset
from .evaluate import MetricsReport, f1_scores
from .finetune import predict_masks
from .network import load_checkpoint, save_checkpoint

OUT_ENV_VAR = "CASSEG_OUT"


def _default_out() -> str:
    return os.environ.get(OUT_ENV_VAR, "runs")


def _add_common(p: argparse.ArgumentParser, budgets: bool = False) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON; defaults fill missing fields")
    p.add_argument("--seed", type=int, action="append", help="run seed (repeatable, replaces config seeds)")
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV_VAR} or ./runs)")
    p.add_argument("--method", action="append", choices=xp.METHODS, help="method (repeatable, replaces config methods)")
    p.add_argument("--lambda", dest="lam", type=float, help="reconstruction weight in the phase-2 loss")
    p.add_argument("--k", type=int, help="number of clusters (default 2 * num_classes)")
    p.add_argument("--n", type=int, action="append", help="few-shot size (repeatable, replaces config sizes)")
    if budgets:
        p.add_argument("--budget", type=int, action="append", help="labeling budget (repeatable)")
        p.add_argument("--rounds", type=int, help="active-learning rounds per budget")
    p.add_argument("--force", action="store_true", help="ignore cached artifacts")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")


def resolve_config(args) -> xp.ExperimentConfig:
    if getattr(args, "config", None):
        cfg = xp.ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = xp.default_benchmark_config()
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    elif cfg.out_dir == "runs":
        cfg.out_dir = _default_out()
    if getattr(args, "seed", None):
        cfg.seeds = list(args.seed)
    if getattr(args, "method", None):
        cfg.methods = list(args.method)
    if getattr(args, "lam", None) is not None:
        cfg.pretrain = replace(cfg.pretrain, lam=args.lam)
    if getattr(args, "k", None) is not None:
        cfg.pretrain = replace(cfg.pretrain, k=args.k)
    if getattr(args, "n", None):
        cfg.few_shot_sizes = list(args.n)
    if getattr(args, "rounds", None):
        cfg.active_rounds = args.rounds
    cfg.validate()
    return cfg


def _maybe_print_config(args, cfg: xp.ExperimentConfig) -> bool:
    if getattr(args, "print_config", False):
        payload = dict(cfg.to_dict(), config_digest=xp.config_digest(cfg))
        print(json.dumps(payload, indent=2, sort_keys=True))
        return True
    return False


def cmd_synth_data(args) -> int:
    cfg = SyntheticConfig(
        n_labeled=args.n_labeled,
        n_unlabeled=args.n_unlabeled,
        height=args.height,
        width=args.width,
        channels=args.channels,
        num_classes=args.classes,
        modes_per_class=args.modes_per_class,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    ds = generate_synthetic(cfg)
    manifest = save_dataset(ds, args.out, force=args.force)
    print(f"wrote {ds.n_labeled} labeled + {ds.n_unlabeled} unlabeled patches to {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    ds = xp.load_data(cfg)
    store = xp.ArtifactStore(cfg, ds, force=args.force)
    for seed in cfg.seeds:
        store.phase1(seed)
        print(f"phase 1 (seed {seed}): {store.dir / f'phase1_s{seed}.ckpt'}")
    return 0


def cmd_cluster(args) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    ds = xp.load_data(cfg)
    store = xp.ArtifactStore(cfg, ds, force=args.force)
    for seed in cfg.seeds:
        _, cs, _ = store.phase2(seed, cfg.pretrain.lam)
        print(
            f"phase 2 (seed {seed}, lambda {cfg.pretrain.lam:g}, k {cs.k}): "
            f"{store.dir / f'phase2_lam{cfg.pretrain.lam:g}_s{seed}.ckpt'}"
        )
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    reports, failures = xp.run_experiment(cfg, force=args.force)
    return _finish(cfg, reports, failures)


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    reports, failures = xp.run_experiment(cfg, force=args.force)
    return _finish(cfg, reports, failures)


def cmd_active(args) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    budgets = args.budget or []
    reports, failures = xp.run_active(cfg, budgets, force=args.force)
    return _finish(cfg, reports, failures)


def _finish(cfg, reports, failures) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xp.write_reports_csv(reports, out / "reports.csv")
    rows = xp.write_summary_csv(reports, out / "summary.csv")
    print(xp.format_summary(rows))
    if failures:
        print(f"\n{len(failures)} cell(s) failed:", file=sys.stderr)
        for f in failures:
            print(f"  {f['cell']}: {f['error']}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if not ds.labeled:
        raise ValidationError("dataset: evaluation needs labeled patches")
    pred = predict_masks(net, [p for p, _ in ds.labeled])
    true = np.stack([m.labels for _, m in ds.labeled], axis=0)
    per_class, mean = f1_scores(pred, true, ds.manifest.num_classes)
    report = MetricsReport(per_class_f1=per_class, mean_f1=mean, metadata={"ckpt": str(args.ckpt), "f1_average": "macro"})
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(f"mean F1: {mean:.4f}  per-class: {[round(f, 4) for f in per_class]}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out or _default_out())
    reports = xp.collect_reports(out)
    if not reports:
        print(f"no reports under {out}", file=sys.stderr)
        return 1
    xp.write_reports_csv(reports, out / "reports.csv")
    rows = xp.write_summary_csv(reports, out / "summary.csv")
    print(xp.format_summary(rows))
    print(f"\nwrote {out / 'reports.csv'} and {out / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="casseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the deterministic synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-labeled", type=int, default=SyntheticConfig.n_labeled)
    p.add_argument("--n-unlabeled", type=int, default=SyntheticConfig.n_unlabeled)
    p.add_argument("--height", type=int, default=SyntheticConfig.height)
    p.add_argument("--width", type=int, default=SyntheticConfig.width)
    p.add_argument("--channels", type=int, default=SyntheticConfig.channels)
    p.add_argument("--classes", type=int, default=SyntheticConfig.num_classes)
    p.add_argument("--modes-per-class", type=int, default=SyntheticConfig.modes_per_class)
    p.add_argument("--noise-std", type=float, default=SyntheticConfig.noise_std)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="phase 1: reconstruction pretraining")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("cluster", help="phase 2: kmeans init + EM refinement")
    _add_common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("finetune", help="fine-tune and evaluate the configured cells")
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("experiment", help="run the full method x size x seed matrix")
    _add_common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("active", help="cluster-driven active sampling vs random control")
    _add_common(p, budgets=True)
    p.set_defaults(func=cmd_active)

    p = sub.add_parser("evaluate", help="evaluate a fine-tuned checkpoint on a dataset")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate reports into CSV + comparison table")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
