import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import sqrtm

from adaguide.metrics import (
    DegenerateCovarianceError,
    MetricsError,
    alignment_accuracy,
    cost_report,
    fit_gaussian,
    quality_report,
    w2_gaussian,
)
from adaguide.guidance import GuidanceStrategy
from adaguide.sampler import sample_batch
from adaguide.scheduler import NoiseSchedule, make_grid
from adaguide.score_model import ClassComponent, MixtureModel, load_model, single_gaussian


def sqrt2x2(a):
    # Closed form for 2x2 SPD matrices: (A + sqrt(det A) I) / sqrt(tr A + 2 sqrt(det A)).
    s = math.sqrt(np.linalg.det(a))
    return (a + s * np.eye(2)) / math.sqrt(np.trace(a) + 2 * s)


def w2_oracle(m1, c1, m2, c2, root):
    r = root(c2)
    cross = root(r @ c1 @ r)
    return float(np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2 * np.real(cross)))


def random_spd(rng, d=2):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_fit_gaussian_examples():
    with pytest.raises(DegenerateCovarianceError):
        fit_gaussian(np.tile([1.0, 2.0], (10, 1)))
    with pytest.raises(DegenerateCovarianceError):
        fit_gaussian(np.zeros((2, 2)))
    mean, cov = fit_gaussian(np.array([[-1.0], [1.0]]))
    assert mean.tolist() == [0.0] and cov.tolist() == [[2.0]]


def test_fit_gaussian_monte_carlo():
    x = np.random.default_rng(0).standard_normal((100_000, 2))
    mean, cov = fit_gaussian(x)
    assert np.max(np.abs(mean)) <= 0.02
    assert np.max(np.abs(cov - np.eye(2))) <= 0.05
    np.testing.assert_array_equal(cov, cov.T)


def test_w2_examples():
    rng = np.random.default_rng(1)
    c = random_spd(rng)
    m = rng.normal(size=2)
    assert w2_gaussian((m, c), (m, c)) == pytest.approx(0.0, abs=1e-10)
    mu = np.array([3.0, -4.0])
    assert w2_gaussian((np.zeros(2), np.eye(2)), (mu, np.eye(2))) == pytest.approx(25.0, rel=1e-12)


def test_w2_matches_independent_square_roots():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m1, m2 = rng.normal(size=2), rng.normal(size=2)
        c1, c2 = random_spd(rng), random_spd(rng)
        got = w2_gaussian((m1, c1), (m2, c2))
        assert got == pytest.approx(w2_oracle(m1, c1, m2, c2, sqrt2x2), rel=1e-8)
        assert got == pytest.approx(w2_oracle(m1, c1, m2, c2, sqrtm), rel=1e-8)


def test_w2_rejects_bad_input():
    with pytest.raises(MetricsError):
        w2_gaussian((np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]])), (np.zeros(2), np.eye(2)))
    with pytest.raises(MetricsError):
        w2_gaussian((np.zeros(2), np.eye(2)), (np.zeros(3), np.eye(3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_w2_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    g1 = (rng.normal(size=d), random_spd(rng, d))
    g2 = (rng.normal(size=d), random_spd(rng, d))
    a, b = w2_gaussian(g1, g2), w2_gaussian(g2, g1)
    assert a >= 0 and b >= 0
    assert a == pytest.approx(b, rel=1e-8, abs=1e-10)
    assert w2_gaussian(g1, g1) <= 1e-10


def test_alignment_examples():
    m = load_model("canonical")
    assert alignment_accuracy(m.means, m.labels, m) == 1.0
    sym = MixtureModel(
        2,
        [ClassComponent("a", np.array([4.0, 0.0]), np.eye(2)), ClassComponent("b", np.array([-4.0, 0.0]), np.eye(2))],
        np.array([0.5, 0.5]),
    )
    assert alignment_accuracy(sym.means, ["b", "a"], sym) == 0.0
    one = single_gaussian(2)
    assert alignment_accuracy(np.random.default_rng(0).normal(size=(30, 2)) * 10, ["only"] * 30, one) == 1.0
    with pytest.raises(ValueError):
        alignment_accuracy(m.means, ["c0", "c1", "nope"], m)


def test_alignment_permutation_invariant():
    m = load_model("canonical")
    rng = np.random.default_rng(4)
    x = rng.normal(scale=6.0, size=(200, 2))
    labels = [m.labels[i] for i in rng.integers(0, 3, 200)]
    perm = rng.permutation(200)
    assert alignment_accuracy(x, labels, m) == alignment_accuracy(x[perm], [labels[i] for i in perm], m)


def test_quality_report_on_target_samples():
    m = load_model("canonical")
    rng = np.random.default_rng(5)
    xs, labels = [], []
    for k, c in enumerate(m.labels):
        xs.append(m.means[k] + rng.standard_normal((4000, 2)))
        labels += [c] * 4000
    q = quality_report(np.concatenate(xs), labels, m)
    assert q.alignment_acc == 1.0
    assert sum(cq.n for cq in q.per_class.values()) == 12000
    for cq in q.per_class.values():
        assert 0 <= cq.w2 < 0.01 and cq.mean_err < 0.05 and cq.cov_err < 0.1


def test_quality_report_single_sample_is_flagged():
    m = load_model("canonical")
    q = quality_report(m.means[:1], ["c0"], m)
    cq = q.per_class["c0"]
    assert math.isnan(cq.w2) and math.isnan(cq.cov_err) and cq.mean_err == 0.0


@pytest.mark.parametrize("T", [19, 28, 50])
def test_cost_report_examples(T):
    m = load_model("canonical")
    sched = NoiseSchedule("vp-linear")
    grid = make_grid(sched, T)
    _, full = sample_batch(m, sched, grid, GuidanceStrategy.full_cfg(), "c0", 5, 0)
    assert cost_report(full, T).evals_saved_ratio == 0.0
    _, half = sample_batch(m, sched, grid, GuidanceStrategy.step_ag(0.5), "c0", 5, 0)
    _, low = sample_batch(m, sched, grid, GuidanceStrategy.step_ag(0.3), "c0", 5, 0, diagnostic_dual_eval=True)
    rep = cost_report(low, T)
    assert rep.total_evals == sum(tr.total_evals for tr in low) == 5 * (T + math.floor(0.3 * T))
    assert rep.diagnostic_evals == sum(tr.diagnostic_evals for tr in low)
    if T % 2 == 0:
        assert cost_report(half, T).evals_saved_ratio == 0.25
    if T == 19:
        assert rep.total_evals == 5 * 24
        assert rep.evals_saved_ratio == pytest.approx((38 - 24) / 38, abs=1e-15)
    with pytest.raises(MetricsError):
        cost_report(full, T + 1)
