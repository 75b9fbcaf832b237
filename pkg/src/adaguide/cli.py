"""Command line entry point: ``adaguide {run,sweep,snr-curves,gamma-curves,validate-model}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench
from .scheduler import KINDS, NoiseSchedule
from .score_model import load_model

log = logging.getLogger("adaguide")


def _add_run_flags(parser: argparse.ArgumentParser, as_lists: bool = False) -> None:
    kind = str if as_lists else None
    lst = " (comma-separated list)" if as_lists else ""
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--model", help="mixture spec path or 'canonical'")
    parser.add_argument("--schedule", choices=KINDS)
    parser.add_argument("--schedule-param", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--T", type=kind or int, help="inference steps" + lst)
    parser.add_argument("--strategy", help="full_cfg, conditional_only, unconditional_only, "
                        "step_ag, snr_ag or similarity_ag" + lst)
    parser.add_argument("--p", type=kind or float, help="guidance ratio for step_ag" + lst)
    parser.add_argument("--w", type=kind or float, help="guidance scale" + lst)
    parser.add_argument("--gamma", type=kind or float, help="similarity threshold" + lst)
    parser.add_argument("--lambda", dest="lambda_threshold", type=kind or float, help="SNR threshold" + lst)
    parser.add_argument("--late-score", help="conditional or unconditional" + lst)
    parser.add_argument("--condition", help="class label or 'all'")
    parser.add_argument("--n", type=int, help="samples per condition")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--diag", action="store_true", default=None, help="evaluate both scores every step")
    parser.add_argument("--out", help="CSV file to append results to")
    parser.add_argument("--trace-dir")
    parser.add_argument("--trace-limit", type=int, help="traces written per condition")
    parser.add_argument("--workers", type=int, default=1)


SWEEPABLE = ("strategy", "p", "w", "T", "gamma", "lambda_threshold", "late_score")


def _overrides(args, skip=()) -> dict:
    keys = ("model", "schedule", "T", "strategy", "p", "w", "gamma", "lambda_threshold",
            "late_score", "condition", "n", "seed", "diag", "out", "trace_dir", "trace_limit")
    values = {k: getattr(args, k) for k in keys if k not in skip}
    for item in args.schedule_param:
        key, sep, value = item.partition("=")
        if not sep:
            raise bench.ConfigError(f"--schedule-param expects KEY=VALUE, got {item!r}")
        values[key] = float(value)
    return values


def cmd_run(args) -> int:
    config = bench.load_config(args.config, _overrides(args))
    result = bench.run_experiment(config, workers=args.workers)
    labels = load_model(config.model).labels
    sys.stdout.write(bench.results_to_csv([result], labels))
    return 0


def _parse_axis(name: str, text: str) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if name == "T":
        return [int(s) for s in items]
    if name in ("p", "w", "gamma", "lambda_threshold"):
        return [float(s) for s in items]
    return items


def cmd_sweep(args) -> int:
    axes, scalar = {}, {}
    for name in SWEEPABLE:
        raw = getattr(args, name)
        if raw is None:
            continue
        values = _parse_axis(name, raw)
        if len(values) == 1 and "," not in raw:
            scalar[name] = values[0]
        else:
            axes[name] = values
    if args.axes:
        axes.update({k: v for k, v in json.loads(args.axes).items()})
    if not axes:
        axes = bench.default_grid_axes()
        scalar.setdefault("strategy", "step_ag")
    overrides = _overrides(args, skip=SWEEPABLE)
    overrides.update(scalar)
    template = bench.load_config(args.config, overrides)
    results = bench.sweep(template, axes, workers=args.workers)
    labels = load_model(template.model).labels
    sys.stdout.write(bench.results_to_csv(results, labels))
    return 0


def cmd_snr_curves(args) -> int:
    schedules = [NoiseSchedule(k) for k in args.schedules.split(",")]
    path = bench.emit_snr_curves(schedules, args.T, args.out, dense_T=args.dense_T)
    print(path)
    return 0


def cmd_gamma_curves(args) -> int:
    config = bench.load_config(args.config, _overrides(args))
    path = bench.emit_gamma_curves(config, args.curve_out, n_avg=args.n_avg)
    print(path)
    return 0


def cmd_validate_model(args) -> int:
    model = load_model(args.path)
    print(f"ok: dim={model.dim} classes={','.join(model.labels)} "
          f"weights={','.join(f'{w:.6g}' for w in model.class_weights)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaguide", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration and append a CSV row")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the Cartesian product of parameter lists")
    _add_run_flags(p, as_lists=True)
    p.add_argument("--axes", help='JSON object of axis lists, e.g. \'{"w": [7, 15]}\'')
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("snr-curves", help="write SNR curves for noise schedules")
    p.add_argument("--schedules", default=",".join(KINDS))
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--dense-T", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_snr_curves)

    p = sub.add_parser("gamma-curves", help="write mean cosine-similarity curves")
    _add_run_flags(p)
    p.add_argument("--n-avg", type=int, default=20)
    p.add_argument("--curve-out", required=True, help="output CSV for the curve")
    p.set_defaults(func=cmd_gamma_curves)

    p = sub.add_parser("validate-model", help="load and check a mixture spec")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate_model)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"adaguide {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
