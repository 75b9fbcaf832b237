"""Classifier-free guidance and adaptive guidance strategies.

Every strategy reduces to a per-step choice between the guided combination
(two model evaluations) and a single conditional or unconditional score (one
evaluation). ``decide`` emits that choice; ``expected_evals`` gives the cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .scheduler import NoiseSchedule, TimestepGrid, snr, snr_crossing_step
from .score_model import ScoreKind

ScoreType = ScoreKind

DEFAULT_W = 7.0


class StrategyKind(str, Enum):
    FULL_CFG = "full_cfg"
    CONDITIONAL_ONLY = "conditional_only"
    UNCONDITIONAL_ONLY = "unconditional_only"
    STEP_AG = "step_ag"
    SNR_AG = "snr_ag"
    SIMILARITY_AG = "similarity_ag"


ADAPTIVE = (StrategyKind.STEP_AG, StrategyKind.SNR_AG, StrategyKind.SIMILARITY_AG)


class Mode(str, Enum):
    GUIDED = "guided"
    SINGLE = "single"


class GuidanceError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceStrategy:
    kind: StrategyKind
    w: float = DEFAULT_W
    p: float | None = None
    lambda_threshold: float | None = None
    gamma_threshold: float | None = None
    late_score: ScoreType = ScoreType.CONDITIONAL

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        object.__setattr__(self, "late_score", ScoreType(self.late_score))
        w = float(self.w)
        if not math.isfinite(w) or w < 0:
            raise GuidanceError(f"guidance scale must be finite and >= 0, got {self.w}")
        object.__setattr__(self, "w", w)
        if self.kind is StrategyKind.STEP_AG:
            if self.p is None or not 0.0 <= float(self.p) <= 1.0:
                raise GuidanceError(f"step_ag needs p in [0, 1], got {self.p}")
            object.__setattr__(self, "p", float(self.p))
        if self.kind is StrategyKind.SNR_AG:
            if self.lambda_threshold is None or math.isnan(float(self.lambda_threshold)):
                raise GuidanceError("snr_ag needs a lambda threshold")
            object.__setattr__(self, "lambda_threshold", float(self.lambda_threshold))
        if self.kind is StrategyKind.SIMILARITY_AG:
            if self.gamma_threshold is None or not 0.0 <= float(self.gamma_threshold) <= 1.0:
                raise GuidanceError(f"similarity_ag needs gamma in [0, 1], got {self.gamma_threshold}")
            object.__setattr__(self, "gamma_threshold", float(self.gamma_threshold))

    @classmethod
    def full_cfg(cls, w: float = DEFAULT_W) -> "GuidanceStrategy":
        return cls(StrategyKind.FULL_CFG, w=w)

    @classmethod
    def conditional_only(cls) -> "GuidanceStrategy":
        return cls(StrategyKind.CONDITIONAL_ONLY)

    @classmethod
    def unconditional_only(cls) -> "GuidanceStrategy":
        return cls(StrategyKind.UNCONDITIONAL_ONLY)

    @classmethod
    def step_ag(cls, p: float, w: float = DEFAULT_W, late_score=ScoreType.CONDITIONAL) -> "GuidanceStrategy":
        return cls(StrategyKind.STEP_AG, w=w, p=p, late_score=late_score)

    @classmethod
    def snr_ag(cls, lambda_threshold: float, w: float = DEFAULT_W, late_score=ScoreType.CONDITIONAL):
        return cls(StrategyKind.SNR_AG, w=w, lambda_threshold=lambda_threshold, late_score=late_score)

    @classmethod
    def similarity_ag(cls, gamma_threshold: float, w: float = DEFAULT_W, late_score=ScoreType.CONDITIONAL):
        return cls(StrategyKind.SIMILARITY_AG, w=w, gamma_threshold=gamma_threshold, late_score=late_score)

    @property
    def deterministic(self) -> bool:
        """True when the decision sequence does not depend on the trajectory."""
        return self.kind is not StrategyKind.SIMILARITY_AG


@dataclass(frozen=True)
class StepDecision:
    mode: Mode
    single_score: ScoreType | None = None

    def __post_init__(self):
        if (self.mode is Mode.SINGLE) != (self.single_score is not None):
            raise GuidanceError("single steps need a score type; guided steps must not have one")

    @property
    def evals_this_step(self) -> int:
        return 2 if self.mode is Mode.GUIDED else 1


GUIDED = StepDecision(Mode.GUIDED)
SINGLE_COND = StepDecision(Mode.SINGLE, ScoreType.CONDITIONAL)
SINGLE_UNCOND = StepDecision(Mode.SINGLE, ScoreType.UNCONDITIONAL)


def single(score: ScoreType) -> StepDecision:
    return SINGLE_COND if ScoreType(score) is ScoreType.CONDITIONAL else SINGLE_UNCOND


@dataclass
class SimilarityState:
    """Per-trajectory state of the one-shot similarity switch."""

    switched: bool = False
    switch_step: int | None = None
    last_gamma: float | None = None


def cfg_combine(eps_u, eps_c, w: float) -> np.ndarray:
    """Guided prediction ``eps_u + w * (eps_c - eps_u)``.

    Evaluated as ``(1 - w) * eps_u + w * eps_c`` so that ``w = 1`` returns
    ``eps_c`` and ``w = 0`` returns ``eps_u`` exactly.
    """
    eps_u = np.asarray(eps_u, dtype=float)
    eps_c = np.asarray(eps_c, dtype=float)
    if eps_u.shape != eps_c.shape:
        raise GuidanceError(f"shape mismatch: {eps_u.shape} vs {eps_c.shape}")
    return (1.0 - w) * eps_u + w * eps_c


def cosine_similarity(eps_c, eps_u) -> float:
    """Absolute cosine similarity between the two predictions, in [0, 1]."""
    gamma = cosine_similarity_rows(np.atleast_2d(eps_c), np.atleast_2d(eps_u))
    return float(gamma[0])


def cosine_similarity_rows(eps_c: np.ndarray, eps_u: np.ndarray) -> np.ndarray:
    eps_c = np.asarray(eps_c, dtype=float)
    eps_u = np.asarray(eps_u, dtype=float)
    if eps_c.shape != eps_u.shape:
        raise GuidanceError(f"shape mismatch: {eps_c.shape} vs {eps_u.shape}")
    mc = np.max(np.abs(eps_c), axis=-1, keepdims=True)
    mu = np.max(np.abs(eps_u), axis=-1, keepdims=True)
    if np.any(mc == 0) or np.any(mu == 0):
        raise GuidanceError("cosine similarity is undefined for a zero vector")
    # Max-abs scaling avoids under/overflow; sqrt(sc * su) makes identical inputs give exactly 1.
    eps_c, eps_u = eps_c / mc, eps_u / mu
    sc = (eps_c * eps_c).sum(axis=-1)
    su = (eps_u * eps_u).sum(axis=-1)
    gamma = np.abs((eps_c * eps_u).sum(axis=-1)) / np.sqrt(sc * su)
    return np.minimum(gamma, 1.0)


def guided_step_count(p: float, T: int) -> int:
    """Number of leading guided steps for step_ag: ``floor(p * T)``."""
    if not 0.0 <= p <= 1.0:
        raise GuidanceError(f"p must be in [0, 1], got {p}")
    if T < 1:
        raise GuidanceError(f"T must be >= 1, got {T}")
    # The epsilon guards products like 0.29 * 100 = 28.999999999999996.
    return min(T, math.floor(p * T + 1e-9))


def matching_snr_threshold(schedule: NoiseSchedule, grid: TimestepGrid, p: float) -> float:
    """SNR threshold under which snr_ag reproduces step_ag(p) on ``grid``."""
    n = guided_step_count(p, grid.T)
    if n == 0:
        return 0.0  # every step has positive SNR, so none are guided
    return snr(schedule, grid[n - 1])


def decide(
    strategy: GuidanceStrategy,
    step_index: int,
    grid: TimestepGrid,
    schedule: NoiseSchedule,
    sim_state: SimilarityState | None = None,
    current_gamma: float | None = None,
) -> StepDecision:
    """Decision for 1-based ``step_index``.

    For similarity_ag, ``current_gamma`` is the similarity measured on the
    previous (guided) step. Once it exceeds the threshold the state switches
    and every later step is single-score.
    """
    T = grid.T
    if not 1 <= step_index <= T:
        raise GuidanceError(f"step_index {step_index} outside [1, {T}]")
    kind = strategy.kind
    if kind is StrategyKind.FULL_CFG:
        return GUIDED
    if kind is StrategyKind.CONDITIONAL_ONLY:
        return SINGLE_COND
    if kind is StrategyKind.UNCONDITIONAL_ONLY:
        return SINGLE_UNCOND
    late = single(strategy.late_score)
    if kind is StrategyKind.STEP_AG:
        return GUIDED if step_index <= guided_step_count(strategy.p, T) else late
    if kind is StrategyKind.SNR_AG:
        return GUIDED if snr(schedule, grid[step_index - 1]) <= strategy.lambda_threshold else late

    if sim_state is None:
        raise GuidanceError("similarity_ag needs a SimilarityState")
    if sim_state.switched:
        return late
    if step_index == 1:
        return GUIDED
    if current_gamma is None:
        raise GuidanceError(f"similarity_ag needs the measured gamma before step {step_index}")
    sim_state.last_gamma = float(current_gamma)
    if current_gamma > strategy.gamma_threshold:
        sim_state.switched = True
        sim_state.switch_step = step_index
        return late
    return GUIDED


def expected_evals(
    strategy: GuidanceStrategy, T: int, grid: TimestepGrid, schedule: NoiseSchedule
) -> int | tuple[int, int]:
    """Model evaluations for one trajectory; an inclusive (lo, hi) range for similarity_ag."""
    kind = strategy.kind
    if kind is StrategyKind.FULL_CFG:
        return 2 * T
    if kind in (StrategyKind.CONDITIONAL_ONLY, StrategyKind.UNCONDITIONAL_ONLY):
        return T
    if kind is StrategyKind.STEP_AG:
        return T + guided_step_count(strategy.p, T)
    if kind is StrategyKind.SNR_AG:
        return T + snr_crossing_step(schedule, grid, strategy.lambda_threshold)
    return (T + 1, 2 * T)


def saved_ratio(total_evals: int, T: int, n: int = 1) -> float:
    """Fraction of the full-guidance budget ``2 * T * n`` that was not spent."""
    return 1.0 - total_evals / (2 * T * n)
