#!/usr/bin/env python3
"""Run the default synthetic few-shot benchmark (cas / autoencoder / scratch).

Writes per-cell reports, the flat reports.csv and the aggregated summary.csv
under --out, reusing cached pretraining artifacts on reruns.
"""

import argparse
import sys
from pathlib import Path

from casseg import experiment as xp


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/benchmark"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--sizes", type=int, nargs="+", default=[10])
    ap.add_argument("--methods", nargs="+", default=["cas", "autoencoder", "scratch"], choices=xp.METHODS)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    cfg = xp.default_benchmark_config(str(args.out))
    cfg.seeds = args.seeds
    cfg.few_shot_sizes = args.sizes
    cfg.methods = args.methods

    reports, failures = xp.run_experiment(cfg, force=args.force)
    xp.write_reports_csv(reports, args.out / "reports.csv")
    rows = xp.write_summary_csv(reports, args.out / "summary.csv")
    print(xp.format_summary(rows))
    for f in failures:
        print(f"FAILED {f['cell']}: {f['error']}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
