import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from adaguide.guidance import (
    GUIDED,
    GuidanceError,
    GuidanceStrategy,
    Mode,
    ScoreType,
    SimilarityState,
    StrategyKind,
    cfg_combine,
    cosine_similarity,
    decide,
    expected_evals,
    guided_step_count,
    matching_snr_threshold,
    saved_ratio,
)
from adaguide.scheduler import NoiseSchedule, make_grid, snr_crossing_step

from conftest import ALL_SCHEDULES

finite = st.floats(-1e6, 1e6, allow_nan=False)
vec = arrays(np.float64, 4, elements=finite)
any_vec = arrays(np.float64, 4, elements=st.floats(-1e300, 1e300, allow_nan=False))


def decisions(strategy, sched, T, gammas=None):
    grid = make_grid(sched, T)
    state = SimilarityState()
    out = []
    for i in range(1, T + 1):
        g = None if gammas is None or i == 1 else gammas[i - 2]
        out.append(decide(strategy, i, grid, sched, state, g))
    return out


def test_cfg_combine_examples():
    u, c = np.array([0.3, -2.0]), np.array([1.5, 4.0])
    np.testing.assert_array_equal(cfg_combine(u, c, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(u, c, 0.0), u)
    np.testing.assert_array_equal(cfg_combine([0.0, 0.0], [1.0, 0.0], 7.0), [7.0, 0.0])
    with pytest.raises(GuidanceError):
        cfg_combine([0.0], [1.0, 2.0], 1.0)


@settings(max_examples=300)
@given(vec, vec)
def test_cfg_identities(u, c):
    np.testing.assert_array_equal(cfg_combine(u, c, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(u, c, 0.0), u)


def test_cfg_linearity():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        u, c = rng.normal(size=5), rng.normal(size=5)
        w = rng.uniform(0, 20)
        np.testing.assert_allclose(cfg_combine(u, c, w) - u, w * (c - u), rtol=1e-12, atol=1e-12)


def test_cosine_similarity_examples():
    v = np.array([1.0, -2.0, 0.5])
    assert cosine_similarity(v, v) == 1.0
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cosine_similarity(v, -v) == 1.0
    with pytest.raises(GuidanceError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=300)
@given(vec, vec, st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3))
def test_cosine_range(a, b, scale):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    g = cosine_similarity(a, b)
    assert 0.0 <= g <= 1.0
    assert cosine_similarity(a, scale * a) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("T,p,n", [(28, 0.5, 14), (19, 0.3, 5), (50, 1.0, 50), (12, 1.0, 12), (100, 0.29, 29), (10, 0.0, 0)])
def test_guided_step_count(T, p, n):
    assert guided_step_count(p, T) == n


def test_forward_pass_equality_example():
    # T=19, p=0.3 and T=12, p=1.0 both cost 24 forward passes.
    lin = NoiseSchedule("vp-linear")
    ag = expected_evals(GuidanceStrategy.step_ag(0.3), 19, make_grid(lin, 19), lin)
    full = expected_evals(GuidanceStrategy.full_cfg(), 12, make_grid(lin, 12), lin)
    assert ag == full == 24


def test_expected_evals_examples():
    lin = NoiseSchedule("vp-linear")
    g = lambda T: make_grid(lin, T)
    assert expected_evals(GuidanceStrategy.full_cfg(), 28, g(28), lin) == 56
    assert expected_evals(GuidanceStrategy.step_ag(0.5), 50, g(50), lin) == 75
    assert saved_ratio(75, 50) == 0.25
    assert expected_evals(GuidanceStrategy.conditional_only(), 50, g(50), lin) == 50
    assert expected_evals(GuidanceStrategy.similarity_ag(0.9), 50, g(50), lin) == (51, 100)
    rf = NoiseSchedule("rectified-flow")
    assert expected_evals(GuidanceStrategy.snr_ag(1.0), 10, make_grid(rf, 10), rf) == 16


def test_decide_examples():
    lin = NoiseSchedule("vp-linear")
    full = decisions(GuidanceStrategy.full_cfg(), lin, 28)
    assert all(d is GUIDED and d.evals_this_step == 2 for d in full)
    ag = decisions(GuidanceStrategy.step_ag(0.5), lin, 28)
    assert all(d.mode is Mode.GUIDED for d in ag[:14])
    assert all(d.mode is Mode.SINGLE and d.single_score is ScoreType.CONDITIONAL for d in ag[14:])
    un = decisions(GuidanceStrategy.step_ag(0.5, late_score="unconditional"), lin, 28)
    assert all(d.single_score is ScoreType.UNCONDITIONAL for d in un[14:])
    only_u = decisions(GuidanceStrategy.unconditional_only(), lin, 5)
    assert all(d.evals_this_step == 1 and d.single_score is ScoreType.UNCONDITIONAL for d in only_u)


def test_similarity_degenerate_switches_after_first_step():
    lin = NoiseSchedule("vp-linear")
    # A single-class model makes both predictions identical, so every gamma is 1.
    seq = decisions(GuidanceStrategy.similarity_ag(0.999), lin, 20, gammas=[1.0] * 20)
    assert seq[0] is GUIDED
    assert all(d.mode is Mode.SINGLE for d in seq[1:])
    assert sum(d.evals_this_step for d in seq) == 21


def test_similarity_never_fires_and_one_shot():
    lin = NoiseSchedule("vp-linear")
    seq = decisions(GuidanceStrategy.similarity_ag(0.9), lin, 10, gammas=[0.5] * 10)
    assert all(d is GUIDED for d in seq)
    # Equal to the threshold does not fire; once fired, later low gammas do not resume guidance.
    seq = decisions(GuidanceStrategy.similarity_ag(0.9), lin, 6, gammas=[0.9, 0.95, 0.1, 0.1, 0.1])
    assert [d.mode for d in seq] == [Mode.GUIDED, Mode.GUIDED, Mode.SINGLE, Mode.SINGLE, Mode.SINGLE, Mode.SINGLE]


def test_similarity_requires_gamma():
    lin = NoiseSchedule("vp-linear")
    grid = make_grid(lin, 5)
    strat = GuidanceStrategy.similarity_ag(0.9)
    state = SimilarityState()
    assert decide(strat, 1, grid, lin, state) is GUIDED
    with pytest.raises(GuidanceError):
        decide(strat, 2, grid, lin, state, None)
    with pytest.raises(GuidanceError):
        decide(strat, 6, grid, lin, state, 0.1)


def test_strategy_validation():
    with pytest.raises(GuidanceError):
        GuidanceStrategy.step_ag(1.5)
    with pytest.raises(GuidanceError):
        GuidanceStrategy.similarity_ag(-0.1)
    with pytest.raises(GuidanceError):
        GuidanceStrategy.full_cfg(w=-1.0)
    with pytest.raises(GuidanceError):
        GuidanceStrategy.full_cfg(w=math.inf)
    with pytest.raises(GuidanceError):
        GuidanceStrategy(StrategyKind.SNR_AG)
    assert GuidanceStrategy.step_ag(0.5).late_score is ScoreType.CONDITIONAL
    assert GuidanceStrategy.full_cfg().w == 7.0


@pytest.mark.parametrize("sched", ALL_SCHEDULES, ids=lambda s: s.kind)
@pytest.mark.parametrize("T", [1, 2, 7, 19, 28, 50, 200])
@pytest.mark.parametrize("p", [0.0, 0.1, 0.3, 0.5, 0.77, 1.0])
def test_step_and_snr_ag_equivalent(sched, T, p):
    grid = make_grid(sched, T)
    lam = matching_snr_threshold(sched, grid, p)
    for late in ("conditional", "unconditional"):
        a = decisions(GuidanceStrategy.step_ag(p, late_score=late), sched, T)
        b = decisions(GuidanceStrategy.snr_ag(lam, late_score=late), sched, T)
        assert a == b
    assert snr_crossing_step(sched, grid, lam) == guided_step_count(p, T)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(ALL_SCHEDULES), st.integers(1, 400), st.floats(0.0, 1.0))
def test_count_law(sched, T, p):
    strat = GuidanceStrategy.step_ag(p)
    seq = decisions(strat, sched, T)
    total = sum(d.evals_this_step for d in seq)
    assert total == expected_evals(strat, T, make_grid(sched, T), sched) == T + math.floor(p * T + 1e-9)
    n = guided_step_count(p, T)
    assert saved_ratio(total, T) == pytest.approx((T - n) / (2 * T), abs=1e-15)
    if (p * T).is_integer():
        assert saved_ratio(total, T) == pytest.approx((1 - p) / 2, abs=1e-15)


def test_saving_converges_to_law():
    for p in (0.3, 0.37, 0.5):
        gaps = [abs(saved_ratio(T + guided_step_count(p, T), T) - (1 - p) / 2) for T in (10, 100, 1000, 10000)]
        assert gaps[-1] <= 1 / (2 * 10000)
        assert all(g <= 1 / (2 * T) + 1e-15 for g, T in zip(gaps, (10, 100, 1000, 10000)))


@pytest.mark.parametrize("sched", ALL_SCHEDULES, ids=lambda s: s.kind)
def test_boundary_collapse(sched):
    T = 33
    assert decisions(GuidanceStrategy.step_ag(1.0), sched, T) == decisions(GuidanceStrategy.full_cfg(), sched, T)
    assert decisions(GuidanceStrategy.step_ag(0.0), sched, T) == decisions(GuidanceStrategy.conditional_only(), sched, T)


@settings(max_examples=300)
@given(any_vec)
def test_cosine_of_identical_vectors_is_exactly_one(v):
    if not np.any(v):
        return
    assert cosine_similarity(v, v.copy()) == 1.0
