#!/usr/bin/env python3
"""Active-sampling benchmark: cluster-based querying vs random control.

Reuses (or builds) the cas pretraining artifacts under --out, then runs one
cell per (budget, seed) with both arms and aggregates the results.
"""

import argparse
import sys
from pathlib import Path

from casseg import experiment as xp


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/benchmark"))
    ap.add_argument("--budgets", type=int, nargs="+", default=[10])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--rounds", type=int, default=1)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    cfg = xp.default_benchmark_config(str(args.out))
    cfg.seeds = args.seeds
    cfg.active_rounds = args.rounds

    reports, failures = xp.run_active(cfg, args.budgets, force=args.force)
    xp.write_reports_csv(reports, args.out / "active_reports.csv")
    rows = xp.write_summary_csv(reports, args.out / "active_summary.csv")
    print(xp.format_summary(rows))
    for f in failures:
        print(f"FAILED {f['cell']}: {f['error']}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
