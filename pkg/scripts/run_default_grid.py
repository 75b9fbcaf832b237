"""Default benchmark grid on the canonical preset.

Full guidance against step_ag at p = 0.5 and 0.3 with both late score types
(T=50, w=7, n=4000 per class), plus a w = 7 / 15 comparison. Rows are
written to ``results/default_grid.csv`` and echoed to stdout.

Usage: python scripts/run_default_grid.py [--n 4000] [--schedule vp-linear] [--out-dir results]
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from adaguide.bench import RunConfig, default_grid_axes, results_to_csv, sweep
from adaguide.score_model import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--T", type=int, default=50)
    ap.add_argument("--schedule", default="vp-linear")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model("canonical")
    template = RunConfig(schedule=args.schedule, T=args.T, n=args.n, seed=args.seed, strategy="step_ag")

    grid_csv = out_dir / "default_grid.csv"
    grid_csv.unlink(missing_ok=True)
    results = sweep(dataclasses.replace(template, out=str(grid_csv)), default_grid_axes(), model, args.workers)
    sys.stdout.write(results_to_csv(results, model.labels))

    scale_csv = out_dir / "guidance_scale.csv"
    scale_csv.unlink(missing_ok=True)
    axes = {"p": [1.0, 0.5], "w": [7.0, 15.0]}
    results = sweep(dataclasses.replace(template, out=str(scale_csv)), axes, model, args.workers)
    sys.stdout.write(results_to_csv(results, model.labels, header=False))


if __name__ == "__main__":
    main()
