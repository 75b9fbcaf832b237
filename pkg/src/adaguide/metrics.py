"""Quality and cost metrics for generated samples.

Quality is measured against the known class Gaussians: Bures-Wasserstein
(Frechet) distance per class, plus how often a sample is most probably from
the class it was requested for. Cost is counted in model evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .score_model import MixtureModel, class_posterior


class DegenerateCovarianceError(ValueError):
    pass


class MetricsError(ValueError):
    pass


def fit_gaussian(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (n - 1) covariance.

    Raises:
        DegenerateCovarianceError: with fewer than ``d + 1`` samples or a
            covariance that is not positive definite.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    if n < d + 1:
        raise DegenerateCovarianceError(f"need at least {d + 1} samples for a {d}-dim covariance, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError("sample covariance is not positive definite") from None
    return mean, cov


def _check_spd(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise MetricsError(f"{name} must be square")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise MetricsError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise MetricsError(f"{name} is not positive definite") from None
    return 0.5 * (cov + cov.T)


def psd_sqrt(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetric square root via eigendecomposition.

    Eigenvalues down to ``-tol`` are treated as round-off and floored at 0.
    """
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -tol:
        raise MetricsError(f"matrix has a negative eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def w2_gaussian(g1: tuple, g2: tuple) -> float:
    """Squared 2-Wasserstein distance between ``(mean, cov)`` pairs."""
    m1, c1 = np.asarray(g1[0], dtype=float), _check_spd(g1[1], "first covariance")
    m2, c2 = np.asarray(g2[0], dtype=float), _check_spd(g2[1], "second covariance")
    if m1.shape != m2.shape or c1.shape != c2.shape or c1.shape[0] != m1.shape[0]:
        raise MetricsError("dimension mismatch")
    r2 = psd_sqrt(c2)
    cross = psd_sqrt(r2 @ c1 @ r2)
    diff = m1 - m2
    value = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def alignment_accuracy(samples, labels: Sequence[str], model: MixtureModel) -> float:
    """Fraction of samples whose most probable class is the requested one."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(x) == 0:
        raise MetricsError("no samples")
    if len(labels) != len(x):
        raise MetricsError("one label per sample is required")
    want = np.array([model.index(c) for c in labels])
    got = np.argmax(class_posterior(model, x), axis=1)
    return float(np.mean(got == want))


@dataclass(frozen=True)
class ClassQuality:
    w2: float
    mean_err: float
    cov_err: float
    n: int


@dataclass(frozen=True)
class QualityReport:
    per_class: dict[str, ClassQuality]
    alignment_acc: float


@dataclass(frozen=True)
class CostReport:
    total_evals: int
    diagnostic_evals: int
    mean_wall_ms: float
    evals_saved_ratio: float


def class_quality(samples, model: MixtureModel, label: str) -> ClassQuality:
    """Distance of one class's generated samples to its target Gaussian.

    Covariance-dependent fields are NaN when the samples cannot support a
    covariance estimate.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    k = model.index(label)
    target = (model.means[k], model.covs[k])
    mean = x.mean(axis=0)
    mean_err = float(np.linalg.norm(mean - target[0]))
    try:
        mean, cov = fit_gaussian(x)
    except DegenerateCovarianceError:
        return ClassQuality(math.nan, mean_err, math.nan, len(x))
    return ClassQuality(
        w2=w2_gaussian((mean, cov), target),
        mean_err=mean_err,
        cov_err=float(np.linalg.norm(cov - target[1])),
        n=len(x),
    )


def quality_report(samples, labels: Sequence[str], model: MixtureModel) -> QualityReport:
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    labels = list(labels)
    per_class = {}
    for label in dict.fromkeys(labels):
        mask = np.array([c == label for c in labels])
        per_class[label] = class_quality(x[mask], model, label)
    return QualityReport(per_class, alignment_accuracy(x, labels, model))


def cost_report(traces, T: int) -> CostReport:
    """Aggregate cost over traces that all ran ``T`` steps."""
    traces = list(traces)
    if not traces:
        raise MetricsError("no traces")
    if any(tr.T != T for tr in traces):
        raise MetricsError(f"traces mix step counts; expected T={T}")
    total = sum(tr.total_evals for tr in traces)
    return CostReport(
        total_evals=total,
        diagnostic_evals=sum(tr.diagnostic_evals for tr in traces),
        mean_wall_ms=float(np.mean([tr.wall_ms for tr in traces])),
        evals_saved_ratio=1.0 - total / (2 * T * len(traces)),
    )
