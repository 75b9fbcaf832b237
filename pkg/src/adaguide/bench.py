"""Experiment runner: configs, CSV results, sweeps and curve files."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .guidance import ADAPTIVE, GuidanceStrategy, StrategyKind, expected_evals
from .metrics import ClassQuality, CostReport, QualityReport, cost_report, quality_report
from .sampler import sample, sample_batch, write_trace
from .scheduler import KINDS, NoiseSchedule, make_grid, snr, snr_crossing_step, solve_snr_time
from .score_model import MixtureModel, load_model

BASE_COLUMNS = (
    "strategy",
    "p",
    "w",
    "T",
    "scheduler",
    "late_score",
    "gamma_threshold",
    "lambda_threshold",
    "condition",
    "n_samples",
    "base_seed",
    "total_evals",
    "diagnostic_evals",
    "evals_saved_ratio",
    "mean_wall_ms",
    "alignment_acc",
)
CLASS_FIELDS = ("w2", "mean_err", "cov_err")
WALL_COLUMNS = ("mean_wall_ms",)
SWEEP_AXES = ("strategy", "p", "w", "T", "gamma", "lambda_threshold", "late_score")
_SCHEDULE_PARAM_KEYS = ("beta_min", "beta_max", "s")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: str = "canonical"
    schedule: str = "vp-linear"
    schedule_params: dict = field(default_factory=dict)
    T: int = 50
    strategy: str = "full_cfg"
    p: float | None = None
    w: float | None = 7.0
    gamma: float | None = None
    lambda_threshold: float | None = None
    late_score: str | None = "conditional"
    condition: str = "all"
    n: int = 4000
    seed: int = 0
    diag: bool = False
    out: str | None = None
    trace_dir: str | None = None
    trace_limit: int = 4

    def __post_init__(self):
        if self.schedule not in KINDS:
            raise ConfigError(f"unknown schedule {self.schedule!r}; choose from {KINDS}")
        try:
            StrategyKind(self.strategy)
        except ValueError:
            raise ConfigError(f"unknown strategy {self.strategy!r}") from None
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"T must be a positive integer, got {self.T}")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"n must be a positive integer, got {self.n}")
        if self.trace_limit < 0:
            raise ConfigError("trace_limit must be >= 0")

    def make_schedule(self) -> NoiseSchedule:
        try:
            return NoiseSchedule(self.schedule, dict(self.schedule_params))
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def make_strategy(self) -> GuidanceStrategy:
        kind = StrategyKind(self.strategy)
        try:
            return GuidanceStrategy(
                kind,
                w=7.0 if self.w is None else self.w,
                p=self.p,
                lambda_threshold=self.lambda_threshold,
                gamma_threshold=self.gamma,
                late_score=self.late_score or "conditional",
            )
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def normalized(self) -> "RunConfig":
        """Blank out parameters the strategy ignores, so equivalent cells compare equal."""
        kind = StrategyKind(self.strategy)
        changes = {
            "p": self.p if kind is StrategyKind.STEP_AG else None,
            "gamma": self.gamma if kind is StrategyKind.SIMILARITY_AG else None,
            "lambda_threshold": self.lambda_threshold if kind is StrategyKind.SNR_AG else None,
            "late_score": self.late_score if kind in ADAPTIVE else None,
            "w": None if kind in (StrategyKind.CONDITIONAL_ONLY, StrategyKind.UNCONDITIONAL_ONLY) else self.w,
        }
        if kind is StrategyKind.STEP_AG and self.p is not None and float(self.p) == 1.0:
            changes["late_score"] = None
        return dataclasses.replace(self, **changes)

    def key(self) -> tuple:
        d = dataclasses.asdict(self.normalized())
        d["schedule_params"] = tuple(sorted(d["schedule_params"].items()))
        return tuple(sorted(d.items()))


def _num(v):
    if isinstance(v, str):
        v = v.strip()
        if v.lower() in ("inf", "+inf", "-inf", "nan"):
            return float(v)
        return int(v) if v.lstrip("+-").isdigit() else float(v)
    return v


def config_from_mapping(values: dict) -> RunConfig:
    """Build a config from flat key/value pairs (file contents or CLI flags)."""
    values = {k.replace("-", "_"): v for k, v in values.items() if v is not None}
    if "lambda" in values:
        values["lambda_threshold"] = values.pop("lambda")
    sched = dict(values.pop("schedule_params", {}) or {})
    for key in _SCHEDULE_PARAM_KEYS:
        if key in values:
            sched[key] = float(values.pop(key))
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("T", "n", "seed", "trace_limit"):
        if key in values:
            values[key] = int(_num(values[key]))
    for key in ("p", "w", "gamma", "lambda_threshold"):
        if key in values:
            values[key] = float(_num(values[key]))
    if "diag" in values and isinstance(values["diag"], str):
        values["diag"] = values["diag"].lower() in ("1", "true", "yes")
    return RunConfig(schedule_params=sched, **values)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(values)


def format_schedule(schedule: NoiseSchedule) -> str:
    if not schedule.params:
        return schedule.kind
    return schedule.kind + ":" + ";".join(f"{k}={v!r}" for k, v in sorted(schedule.params.items()))


def parse_schedule(text: str) -> NoiseSchedule:
    kind, _, rest = text.partition(":")
    params = {}
    for item in filter(None, rest.split(";")):
        k, _, v = item.partition("=")
        params[k] = float(v)
    return NoiseSchedule(kind, params)


@dataclass(frozen=True)
class RunResult:
    config: RunConfig
    quality: QualityReport
    cost: CostReport


def csv_header(labels: Sequence[str]) -> list[str]:
    return list(BASE_COLUMNS) + [f"{f}[{c}]" for c in labels for f in CLASS_FIELDS]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def result_to_row(result: RunResult, labels: Sequence[str]) -> list[str]:
    cfg = result.config.normalized()
    q, c = result.quality, result.cost
    row = [
        cfg.strategy,
        cfg.p,
        cfg.w,
        cfg.T,
        format_schedule(cfg.make_schedule()),
        cfg.late_score,
        cfg.gamma,
        cfg.lambda_threshold,
        cfg.condition,
        cfg.n,
        cfg.seed,
        c.total_evals,
        c.diagnostic_evals,
        c.evals_saved_ratio,
        c.mean_wall_ms,
        q.alignment_acc,
    ]
    for label in labels:
        cq = q.per_class.get(label)
        row += [None] * 3 if cq is None else [cq.w2, cq.mean_err, cq.cov_err]
    return [_cell(v) for v in row]


def _opt_float(s: str):
    return float(s) if s != "" else None


def _nan_float(s: str) -> float:
    return float(s) if s != "" else math.nan


def row_to_result(row: dict, labels: Sequence[str], model_path: str = "canonical") -> RunResult:
    """Inverse of :func:`result_to_row` for a row read with ``csv.DictReader``."""
    schedule = parse_schedule(row["scheduler"])
    cfg = RunConfig(
        model=model_path,
        schedule=schedule.kind,
        schedule_params=dict(schedule.params),
        T=int(row["T"]),
        strategy=row["strategy"],
        p=_opt_float(row["p"]),
        w=_opt_float(row["w"]),
        gamma=_opt_float(row["gamma_threshold"]),
        lambda_threshold=_opt_float(row["lambda_threshold"]),
        late_score=row["late_score"] or None,
        condition=row["condition"],
        n=int(row["n_samples"]),
        seed=int(row["base_seed"]),
    )
    per_class = {}
    for label in labels:
        vals = [row[f"{f}[{label}]"] for f in CLASS_FIELDS]
        if all(v == "" for v in vals):
            continue
        per_class[label] = ClassQuality(*(_nan_float(v) for v in vals), n=cfg.n)
    quality = QualityReport(per_class, float(row["alignment_acc"]))
    cost = CostReport(
        total_evals=int(row["total_evals"]),
        diagnostic_evals=int(row["diagnostic_evals"]),
        mean_wall_ms=_nan_float(row["mean_wall_ms"]),
        evals_saved_ratio=float(row["evals_saved_ratio"]),
    )
    return RunResult(cfg, quality, cost)


def results_to_csv(results: Iterable[RunResult], labels: Sequence[str], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(csv_header(labels))
    for r in results:
        writer.writerow(result_to_row(r, labels))
    return buf.getvalue()


def read_results(path_or_text: str | Path, labels: Sequence[str], model_path: str = "canonical") -> list[RunResult]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else path_or_text
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != csv_header(labels):
        raise ConfigError("CSV header does not match the result schema for these labels")
    return [row_to_result(row, labels, model_path) for row in reader]


def append_results(path: str | Path, results: Sequence[RunResult], labels: Sequence[str]) -> None:
    path = Path(path)
    header = csv_header(labels)
    if path.exists() and path.stat().st_size > 0:
        with path.open(newline="") as fh:
            existing = next(csv.reader(fh), None)
        if existing != header:
            raise ConfigError(f"{path} has a different header; refusing to append")
        text = results_to_csv(results, labels, header=False)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        text = results_to_csv(results, labels, header=True)
    with path.open("a", newline="") as fh:
        fh.write(text)


def _conditions(config: RunConfig, model: MixtureModel) -> list[str]:
    if config.condition == "all":
        return model.labels
    model.index(config.condition)
    return [config.condition]


def trace_name(config: RunConfig, condition: str, i: int) -> str:
    cfg = config.normalized()
    parts = [cfg.strategy, f"T{cfg.T}", cfg.schedule]
    for tag, v in (("p", cfg.p), ("w", cfg.w), ("g", cfg.gamma), ("l", cfg.lambda_threshold)):
        if v is not None:
            parts.append(f"{tag}{v:g}")
    if cfg.late_score:
        parts.append(cfg.late_score[:4])
    parts += [condition, f"s{cfg.seed}", f"{i:05d}"]
    return "_".join(parts) + ".csv"


def run_experiment(config: RunConfig, model: MixtureModel | None = None, workers: int = 1) -> RunResult:
    """Sample ``config.n`` trajectories per condition and score them.

    Condition ``k`` (in model label order) uses seeds ``seed + k * n + i``,
    whatever the strategy, so cells share their prior noise. Appends one row
    to ``config.out`` and writes up to ``trace_limit`` traces per condition
    when ``config.trace_dir`` is set.
    """
    model = model or load_model(config.model)
    schedule = config.make_schedule()
    strategy = config.make_strategy()
    grid = make_grid(schedule, config.T)
    xs, labels, traces = [], [], []
    for k, cond in enumerate(_conditions(config, model)):
        base = config.seed + k * config.n
        x0, tr = sample_batch(
            model, schedule, grid, strategy, cond, config.n, base, config.diag, workers=workers
        )
        xs.append(x0)
        labels += [cond] * config.n
        traces += tr
        if config.trace_dir and config.trace_limit:
            out_dir = Path(config.trace_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            for i, trace in enumerate(tr[: config.trace_limit]):
                write_trace(trace, out_dir / trace_name(config, cond, i))
    quality = quality_report(np.concatenate(xs), labels, model)
    cost = cost_report(traces, config.T)
    if strategy.deterministic:
        expected = expected_evals(strategy, config.T, grid, schedule) * len(traces)
        assert cost.total_evals == expected, (cost.total_evals, expected)
    result = RunResult(config, quality, cost)
    if config.out:
        append_results(config.out, [result], model.labels)
    return result


def expand_sweep(template: RunConfig, axes: dict[str, Sequence]) -> list[RunConfig]:
    """Cartesian product of ``axes`` over ``template`` with equivalent cells removed.

    Axis order is fixed (strategy, p, w, T, gamma, lambda, late score) and the
    last axis varies fastest.
    """
    if not axes:
        raise ConfigError("a sweep needs at least one axis")
    axes = {("lambda_threshold" if k in ("lambda", "lambda_") else k): v for k, v in axes.items()}
    unknown = set(axes) - set(SWEEP_AXES)
    if unknown:
        raise ConfigError(f"unknown sweep axes {sorted(unknown)}; allowed: {SWEEP_AXES}")
    for k, vals in axes.items():
        if len(vals) == 0:
            raise ConfigError(f"sweep axis {k!r} is empty")
    names = [k for k in SWEEP_AXES if k in axes]
    cells, seen = [], set()
    for combo in itertools.product(*(axes[k] for k in names)):
        cfg = dataclasses.replace(template, **dict(zip(names, combo)))
        cfg.make_strategy()  # validate early
        if cfg.key() in seen:
            continue
        seen.add(cfg.key())
        cells.append(cfg.normalized())
    return cells


def sweep(
    template: RunConfig,
    axes: dict[str, Sequence],
    model: MixtureModel | None = None,
    workers: int = 1,
) -> list[RunResult]:
    """Run every sweep cell; rows are written in cell order by a single writer."""
    model = model or load_model(template.model)
    cells = [dataclasses.replace(c, out=None) for c in expand_sweep(template, axes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: run_experiment(c, model), cells))
    else:
        results = [run_experiment(c, model) for c in cells]
    results = [dataclasses.replace(r, config=dataclasses.replace(r.config, out=template.out)) for r in results]
    if template.out:
        append_results(template.out, results, model.labels)
    return results


def default_grid_axes() -> dict[str, list]:
    """Full guidance vs step_ag at p = 0.5 and 0.3 with both late score types."""
    return {"p": [1.0, 0.5, 0.3], "late_score": ["conditional", "unconditional"]}


def emit_snr_curves(
    schedules: Sequence[NoiseSchedule], T: int, out_path: str | Path, dense_T: int = 1000
) -> Path:
    """Write SNR along the sampling grid for each schedule.

    Each schedule gets an ``inference`` curve on a ``T``-step grid and a
    ``training`` curve on a ``dense_T``-step grid. ``fraction`` is the share of
    sampling completed before the step, ``(step_index - 1) / T``. A JSON
    sidecar records the grid conventions and where each schedule reaches SNR 1.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "grid": "uniform trailing t_i = i/T, i = T..1, clamped into the schedule domain",
        "fraction": "(step_index - 1) / T",
        "curves": {"inference": T, "training": dense_T},
        "snr_one": {},
    }
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["schedule", "grid", "T", "step_index", "t", "fraction", "snr"])
    for schedule in schedules:
        name = format_schedule(schedule)
        for label, n_steps in (("inference", T), ("training", dense_T)):
            grid = make_grid(schedule, n_steps)
            for i, t in enumerate(grid):
                writer.writerow([name, label, n_steps, i + 1, repr(t), repr(i / n_steps), repr(snr(schedule, t))])
        t_star = solve_snr_time(schedule, 1.0)
        grid = make_grid(schedule, T)
        meta["snr_one"][name] = {
            "t": t_star,
            "fraction": 1.0 - t_star,
            "inference_steps_not_exceeding": snr_crossing_step(schedule, grid, 1.0),
        }
    out_path.write_text(buf.getvalue())
    out_path.with_suffix(out_path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out_path


def gamma_curve(config: RunConfig, n_avg: int = 20, model: MixtureModel | None = None) -> np.ndarray:
    """Per-step similarity for ``n_avg`` trajectories with dual evaluation forced on.

    Trajectory ``i`` uses seed ``config.seed + i``; with condition ``all`` the
    labels are cycled. Returns an ``(n_avg, T)`` array.
    """
    if n_avg < 1:
        raise ConfigError("n_avg must be >= 1")
    model = model or load_model(config.model)
    schedule = config.make_schedule()
    strategy = config.make_strategy()
    grid = make_grid(schedule, config.T)
    conds = _conditions(config, model)
    rows = []
    for i in range(n_avg):
        _, trace = sample(model, schedule, grid, strategy, conds[i % len(conds)], config.seed + i, True)
        rows.append(trace.gamma)
    return np.array(rows)


def emit_gamma_curves(
    config: RunConfig, out_path: str | Path, n_avg: int = 20, model: MixtureModel | None = None
) -> Path:
    """Write the per-step mean similarity (plus min and max) over ``n_avg`` trajectories."""
    model = model or load_model(config.model)
    gammas = gamma_curve(config, n_avg, model)
    schedule = config.make_schedule()
    grid = make_grid(schedule, config.T)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step_index", "t", "gamma_mean", "gamma_min", "gamma_max", "n_avg"])
    for i, t in enumerate(grid):
        col = gammas[:, i]
        writer.writerow([i + 1, repr(t), repr(float(col.mean())), repr(float(col.min())), repr(float(col.max())), n_avg])
    out_path.write_text(buf.getvalue())
    return out_path
