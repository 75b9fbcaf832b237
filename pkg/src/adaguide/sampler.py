"""Deterministic DDIM sampling under a guidance strategy, with per-step traces.

A batch of trajectories is advanced together, but every quantity is computed
row by row, so a trajectory's result does not depend on which batch (or
chunk, or thread) it ran in.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .guidance import (
    GuidanceStrategy,
    Mode,
    ScoreType,
    SimilarityState,
    StepDecision,
    cfg_combine,
    cosine_similarity_rows,
    decide,
    GUIDED,
    SINGLE_COND,
    SINGLE_UNCOND,
)
from .scheduler import NoiseSchedule, TimestepGrid, alpha_sigma
from .score_model import MixtureModel, ModelError, eps_cond_rows, eps_uncond_rows, noisy_params

TRACE_COLUMNS = (
    "step_index",
    "t",
    "alpha",
    "sigma",
    "snr",
    "gamma",
    "mode",
    "single_score",
    "evals_this_step",
    "cum_evals",
)

# Decision codes used in the columnar trace.
_DECISIONS = (GUIDED, SINGLE_COND, SINGLE_UNCOND)
_CODE = {d: i for i, d in enumerate(_DECISIONS)}
_EVALS = np.array([d.evals_this_step for d in _DECISIONS])


@dataclass(frozen=True)
class StepRecord:
    step_index: int
    t: float
    alpha: float
    sigma: float
    snr: float
    gamma: float | None
    decision: StepDecision
    cum_evals: int


@dataclass(frozen=True, eq=False)
class SampleTrace:
    """Columnar per-step record of one trajectory.

    ``gamma`` holds NaN on steps where only one score was evaluated.
    ``scores`` is filled only when a run records its score inputs.
    """

    t: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    snr: np.ndarray
    gamma: np.ndarray
    codes: np.ndarray
    x_init: np.ndarray | None = None
    wall_ms: float = math.nan
    diagnostic_evals: int = 0
    scores: dict | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return len(self.t)

    @property
    def decisions(self) -> list[StepDecision]:
        return [_DECISIONS[c] for c in self.codes]

    @property
    def evals(self) -> np.ndarray:
        return _EVALS[self.codes]

    @property
    def cum_evals(self) -> np.ndarray:
        return np.cumsum(self.evals)

    @property
    def total_evals(self) -> int:
        return int(self.evals.sum())

    @property
    def rows(self) -> list[StepRecord]:
        cum = self.cum_evals
        return [
            StepRecord(
                step_index=i + 1,
                t=float(self.t[i]),
                alpha=float(self.alpha[i]),
                sigma=float(self.sigma[i]),
                snr=float(self.snr[i]),
                gamma=None if math.isnan(self.gamma[i]) else float(self.gamma[i]),
                decision=_DECISIONS[self.codes[i]],
                cum_evals=int(cum[i]),
            )
            for i in range(self.T)
        ]


def ddim_step(x_t, eps, t: float, t_next: float | None, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from ``t`` to ``t_next``; ``None`` means the terminal step.

    Reconstructs ``x0_hat = (x_t - sigma(t) * eps) / alpha(t)`` and re-noises it to
    ``t_next``. At the terminal step ``x0_hat`` itself is returned.
    """
    x_t = np.asarray(x_t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x_t.shape != eps.shape:
        raise ModelError(f"shape mismatch: {x_t.shape} vs {eps.shape}")
    a, s = alpha_sigma(schedule, t)
    x0_hat = (x_t - s * eps) / a
    if t_next is None:
        return x0_hat
    if not t_next < t:
        raise ValueError(f"t_next={t_next} must be smaller than t={t}")
    a_next, s_next = alpha_sigma(schedule, t_next)
    return a_next * x0_hat + s_next * eps


def prior_draw(schedule: NoiseSchedule, grid: TimestepGrid, dim: int, seed: int) -> np.ndarray:
    """Initial noise ``x_T ~ N(0, sigma(t_T)**2 I)``; depends on the seed only."""
    _, s = alpha_sigma(schedule, grid[0])
    return s * np.random.default_rng(seed).standard_normal(dim)


def _run(
    model: MixtureModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    strategy: GuidanceStrategy,
    k: int,
    x_init: np.ndarray,
    diagnostic_dual_eval: bool,
    record_scores: bool,
):
    n, d = x_init.shape
    T = grid.T
    x = x_init.copy()
    coefs = [alpha_sigma(schedule, t) for t in grid]
    gammas = np.full((n, T), np.nan)
    codes = np.zeros((n, T), dtype=np.int8)
    diag_evals = np.zeros(n, dtype=np.int64)
    if record_scores:
        rec = {
            "x": np.full((n, T + 1, d), np.nan),
            "eps_c": np.full((n, T, d), np.nan),
            "eps_u": np.full((n, T, d), np.nan),
            "eps": np.full((n, T, d), np.nan),
        }
        rec["x"][:, 0] = x
    states = [SimilarityState() for _ in range(n)] if not strategy.deterministic else None

    start = time.perf_counter()
    for i, t in enumerate(grid):
        a, s = coefs[i]
        params = noisy_params(model, a, s)
        if states is None:
            step_codes = np.full(n, _CODE[decide(strategy, i + 1, grid, schedule)], dtype=np.int8)
        else:
            prev = gammas[:, i - 1] if i > 0 else None
            step_codes = np.array(
                [
                    _CODE[decide(strategy, i + 1, grid, schedule, st, None if prev is None else prev[r])]
                    for r, st in enumerate(states)
                ],
                dtype=np.int8,
            )
        guided = step_codes == 0
        need_c = guided | (step_codes == 1)
        need_u = guided | (step_codes == 2)
        if diagnostic_dual_eval:
            diag_evals += ~guided
            need_c = need_u = np.ones(n, dtype=bool)

        eps_c = np.full((n, d), np.nan)
        eps_u = np.full((n, d), np.nan)
        if need_c.any():
            eps_c[need_c] = eps_cond_rows(params, x[need_c], k)
        if need_u.any():
            eps_u[need_u] = eps_uncond_rows(params, model.log_weights, x[need_u])
        both = need_c & need_u
        if both.any():
            gammas[both, i] = cosine_similarity_rows(eps_c[both], eps_u[both])

        eps = np.where((step_codes == 2)[:, None], eps_u, eps_c)
        if guided.any():
            eps[guided] = cfg_combine(eps_u[guided], eps_c[guided], strategy.w)
        t_next = grid[i + 1] if i + 1 < T else None
        x = ddim_step(x, eps, t, t_next, schedule)
        codes[:, i] = step_codes
        if record_scores:
            rec["eps_c"][:, i] = eps_c
            rec["eps_u"][:, i] = eps_u
            rec["eps"][:, i] = eps
            rec["x"][:, i + 1] = x
    wall_ms = (time.perf_counter() - start) * 1e3 / n

    t_col = np.array(grid.steps)
    alpha_col = np.array([c[0] for c in coefs])
    sigma_col = np.array([c[1] for c in coefs])
    snr_col = alpha_col / sigma_col
    traces = [
        SampleTrace(
            t=t_col,
            alpha=alpha_col,
            sigma=sigma_col,
            snr=snr_col,
            gamma=gammas[r],
            codes=codes[r],
            x_init=x_init[r].copy(),
            wall_ms=wall_ms,
            diagnostic_evals=int(diag_evals[r]),
            scores={key: v[r] for key, v in rec.items()} if record_scores else None,
        )
        for r in range(n)
    ]
    return x, traces


def sample(
    model: MixtureModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    strategy: GuidanceStrategy,
    condition: str,
    seed: int,
    diagnostic_dual_eval: bool = False,
    record_scores: bool = False,
) -> tuple[np.ndarray, SampleTrace]:
    """Draw one sample for ``condition``; fully determined by the arguments.

    With ``diagnostic_dual_eval`` both scores are evaluated on every step so the
    similarity trace is complete. Those extra evaluations go to
    ``trace.diagnostic_evals`` and never change decisions or ``total_evals``.
    """
    k = model.index(condition)
    x_init = prior_draw(schedule, grid, model.dim, seed)[None]
    x0, traces = _run(model, schedule, grid, strategy, k, x_init, diagnostic_dual_eval, record_scores)
    return x0[0], traces[0]


def sample_batch(
    model: MixtureModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    strategy: GuidanceStrategy,
    condition: str,
    n: int,
    base_seed: int,
    diagnostic_dual_eval: bool = False,
    record_scores: bool = False,
    workers: int = 1,
    chunk_size: int | None = None,
) -> tuple[np.ndarray, list[SampleTrace]]:
    """``n`` independent samples with seeds ``base_seed + i``.

    Returns an ``(n, d)`` array and one trace per sample. Results do not
    depend on ``workers`` or ``chunk_size``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = model.index(condition)
    x_init = np.stack([prior_draw(schedule, grid, model.dim, base_seed + i) for i in range(n)])
    if chunk_size is None:
        chunk_size = n if workers <= 1 else -(-n // workers)
    chunks = [x_init[i : i + chunk_size] for i in range(0, n, chunk_size)]

    def work(chunk):
        return _run(model, schedule, grid, strategy, k, chunk, diagnostic_dual_eval, record_scores)

    if workers <= 1:
        results = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, chunks))
    x0 = np.concatenate([r[0] for r in results])
    traces = [tr for r in results for tr in r[1]]
    return x0, traces


def _fmt(v: float) -> str:
    return repr(float(v))


def trace_to_csv(trace: SampleTrace, delimiter: str = ",") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in trace.rows:
        writer.writerow(
            [
                r.step_index,
                _fmt(r.t),
                _fmt(r.alpha),
                _fmt(r.sigma),
                _fmt(r.snr),
                "" if r.gamma is None else _fmt(r.gamma),
                r.decision.mode.value,
                "" if r.decision.single_score is None else r.decision.single_score.value,
                r.decision.evals_this_step,
                r.cum_evals,
            ]
        )
    return buf.getvalue()


def write_trace(trace: SampleTrace, path: str | Path, delimiter: str = ",") -> Path:
    path = Path(path)
    path.write_text(trace_to_csv(trace, delimiter))
    return path


def parse_trace(text: str, delimiter: str = ",") -> SampleTrace:
    """Parse trace CSV text. ``x_init`` and wall time are not part of the file."""
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    header = next(reader)
    if tuple(header) != TRACE_COLUMNS:
        raise ValueError(f"unexpected trace header {header}")
    cols = {name: [] for name in TRACE_COLUMNS}
    for row in reader:
        for name, value in zip(TRACE_COLUMNS, row):
            cols[name].append(value)
    codes = []
    for i, (mode, score) in enumerate(zip(cols["mode"], cols["single_score"])):
        decision = GUIDED if Mode(mode) is Mode.GUIDED else StepDecision(Mode.SINGLE, ScoreType(score))
        codes.append(_CODE[decision])
        if int(cols["step_index"][i]) != i + 1:
            raise ValueError("trace step indices must run 1..T")
    trace = SampleTrace(
        t=np.array(cols["t"], dtype=float),
        alpha=np.array(cols["alpha"], dtype=float),
        sigma=np.array(cols["sigma"], dtype=float),
        snr=np.array(cols["snr"], dtype=float),
        gamma=np.array([float(g) if g else math.nan for g in cols["gamma"]]),
        codes=np.array(codes, dtype=np.int8),
    )
    if not np.array_equal(trace.evals, np.array(cols["evals_this_step"], dtype=int)):
        raise ValueError("evals_this_step column disagrees with mode column")
    if not np.array_equal(trace.cum_evals, np.array(cols["cum_evals"], dtype=int)):
        raise ValueError("cum_evals column is inconsistent")
    return trace


def read_trace(path: str | Path, delimiter: str = ",") -> SampleTrace:
    return parse_trace(Path(path).read_text(), delimiter)
