"""Adaptive classifier-free guidance over analytic Gaussian-mixture scores."""

from .guidance import (
    GuidanceStrategy,
    Mode,
    ScoreType,
    SimilarityState,
    StepDecision,
    StrategyKind,
    cfg_combine,
    cosine_similarity,
    decide,
    expected_evals,
    guided_step_count,
    matching_snr_threshold,
)
from .metrics import alignment_accuracy, cost_report, fit_gaussian, quality_report, w2_gaussian
from .sampler import SampleTrace, StepRecord, ddim_step, read_trace, sample, sample_batch, write_trace
from .scheduler import NoiseSchedule, TimestepGrid, alpha_sigma, make_grid, snr, snr_crossing_step
from .score_model import (
    ClassComponent,
    MixtureModel,
    canonical_model,
    class_posterior,
    eps_conditional,
    eps_unconditional,
    load_model,
    log_density,
)

__version__ = "0.1.0"
