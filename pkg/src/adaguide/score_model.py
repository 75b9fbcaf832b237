"""Exact epsilon-predictions from a class-conditional Gaussian mixture.

Under the forward process ``x_t = alpha * x_0 + sigma * eps`` a Gaussian
component ``N(mu, Sigma)`` becomes ``N(alpha * mu, alpha**2 * Sigma + sigma**2 * I)``,
so conditional and marginal scores are available in closed form. The
epsilon-prediction is ``-sigma * grad log p_t(x)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .scheduler import NoiseSchedule, alpha_sigma

LOG_2PI = float(np.log(2.0 * np.pi))


class ModelError(ValueError):
    """Malformed mixture specification, unknown label or dimension mismatch."""


class ScoreKind(str, Enum):
    CONDITIONAL = "conditional"
    UNCONDITIONAL = "unconditional"


class ScoreOutput(NamedTuple):
    eps: np.ndarray
    kind: ScoreKind


@dataclass(frozen=True)
class ClassComponent:
    label: str
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class MixtureModel:
    dim: int
    classes: tuple[ClassComponent, ...]
    class_weights: np.ndarray
    means: np.ndarray = field(init=False, repr=False)
    covs: np.ndarray = field(init=False, repr=False)
    log_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        classes = tuple(self.classes)
        if not classes:
            raise ModelError("a mixture needs at least one class")
        d = int(self.dim)
        weights = np.asarray(self.class_weights, dtype=float)
        if weights.shape != (len(classes),):
            raise ModelError("one weight per class is required")
        if np.any(weights <= 0):
            raise ModelError("class weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ModelError(f"class weights sum to {weights.sum()!r}, not 1")
        labels = [c.label for c in classes]
        if len(set(labels)) != len(labels):
            raise ModelError(f"duplicate labels in {labels}")
        means, covs = [], []
        for c in classes:
            mean = np.asarray(c.mean, dtype=float)
            cov = np.asarray(c.cov, dtype=float)
            if mean.shape != (d,) or cov.shape != (d, d):
                raise ModelError(f"class {c.label!r}: expected mean ({d},) and cov ({d},{d})")
            if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
                raise ModelError(f"class {c.label!r}: non-finite parameters")
            if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
                raise ModelError(f"class {c.label!r}: covariance is not symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ModelError(f"class {c.label!r}: covariance is not positive definite") from None
            if np.linalg.eigvalsh(cov).min() <= 1e-9:
                raise ModelError(f"class {c.label!r}: covariance is near singular")
            means.append(mean)
            covs.append(cov)
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "class_weights", weights)
        object.__setattr__(self, "means", np.stack(means))
        object.__setattr__(self, "covs", np.stack(covs))
        object.__setattr__(self, "log_weights", np.log(weights))
        for arr in (self.class_weights, self.means, self.covs, self.log_weights):
            arr.setflags(write=False)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.classes]

    def index(self, label: str) -> int:
        for i, c in enumerate(self.classes):
            if c.label == label:
                return i
        raise ModelError(f"unknown label {label!r}; model has {self.labels}")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "classes": [
                {
                    "label": c.label,
                    "weight": float(w),
                    "mean": self.means[i].tolist(),
                    "cov": self.covs[i].tolist(),
                }
                for i, (c, w) in enumerate(zip(self.classes, self.class_weights))
            ],
        }


def model_from_dict(spec: dict) -> MixtureModel:
    """Build a model from the JSON mixture spec, normalizing weights within 1e-6 of 1."""
    try:
        dim = int(spec["dim"])
        entries = spec["classes"]
        classes = [
            ClassComponent(str(e["label"]), np.asarray(e["mean"], float), np.asarray(e["cov"], float))
            for e in entries
        ]
        weights = np.array([float(e["weight"]) for e in entries])
    except (KeyError, TypeError, ValueError) as err:
        raise ModelError(f"malformed mixture spec: {err}") from None
    total = weights.sum()
    if abs(total - 1.0) > 1e-6:
        raise ModelError(f"class weights sum to {total}, more than 1e-6 away from 1")
    return MixtureModel(dim, classes, weights / total)


PRESETS = ("canonical", "clustered")


def load_model(path: str | Path) -> MixtureModel:
    """Load a mixture spec file, or a bundled preset by name (see ``PRESETS``)."""
    if str(path) in PRESETS:
        text = resources.files("adaguide.presets").joinpath(f"{path}.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as err:
        raise ModelError(f"{path}: invalid JSON ({err})") from None
    return model_from_dict(spec)


def canonical_model() -> MixtureModel:
    """2D, three unit-covariance classes on a circle of radius 8, equal weights."""
    return load_model("canonical")


def single_gaussian(dim: int = 2, mean=None, cov=None, label: str = "only") -> MixtureModel:
    mean = np.zeros(dim) if mean is None else np.asarray(mean, float)
    cov = np.eye(dim) if cov is None else np.asarray(cov, float)
    return MixtureModel(dim, [ClassComponent(label, mean, cov)], np.array([1.0]))


class NoisyParams(NamedTuple):
    """Per-time component parameters of the noised mixture."""

    means: np.ndarray  # (K, d)
    precisions: np.ndarray  # (K, d, d)
    logdets: np.ndarray  # (K,)
    sigma: float


def noisy_params(model: MixtureModel, alpha: float, sigma: float) -> NoisyParams:
    eye = np.eye(model.dim)
    covs = alpha**2 * model.covs + sigma**2 * eye
    chol = np.linalg.cholesky(covs)
    logdets = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    precisions = np.linalg.inv(covs)
    precisions = 0.5 * (precisions + np.swapaxes(precisions, 1, 2))
    return NoisyParams(alpha * model.means, precisions, logdets, sigma)


def _matvec(mat: np.ndarray, v: np.ndarray) -> np.ndarray:
    # Broadcast-and-reduce rather than BLAS so each row is computed the same
    # way regardless of batch size.
    return (v[..., None, :] * mat).sum(axis=-1)


def _component_logpdf(params: NoisyParams, x: np.ndarray) -> np.ndarray:
    """Log density of every component at each row of ``x``; shape (n, K)."""
    diff = x[:, None, :] - params.means[None]
    maha = (diff * _matvec(params.precisions[None], diff)).sum(axis=-1)
    d = x.shape[-1]
    return -0.5 * (maha + params.logdets[None] + d * LOG_2PI)


def responsibilities_from(params: NoisyParams, log_weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    logits = log_weights[None] + _component_logpdf(params, x)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def eps_cond_rows(params: NoisyParams, x: np.ndarray, k: int) -> np.ndarray:
    return params.sigma * _matvec(params.precisions[k], x - params.means[k])


def eps_uncond_rows(params: NoisyParams, log_weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    resp = responsibilities_from(params, log_weights, x)
    diff = x[:, None, :] - params.means[None]
    per_comp = _matvec(params.precisions[None], diff)  # (n, K, d)
    return params.sigma * (resp[..., None] * per_comp).sum(axis=1)


def _as_rows(model: MixtureModel, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    rows = arr[None] if single else arr
    if rows.ndim != 2 or rows.shape[1] != model.dim:
        raise ModelError(f"expected vectors of length {model.dim}, got shape {arr.shape}")
    return rows, single


def _params_at(model: MixtureModel, schedule: NoiseSchedule, t: float) -> NoisyParams:
    a, s = alpha_sigma(schedule, t)
    return noisy_params(model, a, s)


def eps_conditional(model: MixtureModel, schedule: NoiseSchedule, x, t: float, c: str) -> ScoreOutput:
    """Conditional epsilon-prediction for class ``c``. ``x`` may be (d,) or (n, d)."""
    k = model.index(c)
    rows, single = _as_rows(model, x)
    eps = eps_cond_rows(_params_at(model, schedule, t), rows, k)
    return ScoreOutput(eps[0] if single else eps, ScoreKind.CONDITIONAL)


def eps_unconditional(model: MixtureModel, schedule: NoiseSchedule, x, t: float) -> ScoreOutput:
    """Epsilon-prediction of the label-marginalized mixture."""
    rows, single = _as_rows(model, x)
    eps = eps_uncond_rows(_params_at(model, schedule, t), model.log_weights, rows)
    return ScoreOutput(eps[0] if single else eps, ScoreKind.UNCONDITIONAL)


def responsibilities(model: MixtureModel, schedule: NoiseSchedule, x, t: float) -> np.ndarray:
    rows, single = _as_rows(model, x)
    resp = responsibilities_from(_params_at(model, schedule, t), model.log_weights, rows)
    return resp[0] if single else resp


def log_density(model: MixtureModel, schedule: NoiseSchedule, x, t: float, c: str | None = None):
    """``log p_t(x | c)``, or the marginal ``log p_t(x)`` when ``c`` is None."""
    rows, single = _as_rows(model, x)
    logpdf = _component_logpdf(_params_at(model, schedule, t), rows)
    if c is not None:
        out = logpdf[:, model.index(c)]
    else:
        out = logsumexp(model.log_weights[None] + logpdf, axis=1)
    return float(out[0]) if single else out


def class_posterior(model: MixtureModel, x) -> np.ndarray:
    """Posterior over labels for clean data ``x`` (no noise applied)."""
    rows, single = _as_rows(model, x)
    resp = responsibilities_from(noisy_params(model, 1.0, 0.0), model.log_weights, rows)
    return resp[0] if single else resp


def sample_data(model: MixtureModel, n: int, rng: np.random.Generator, c: str | None = None) -> np.ndarray:
    """Draw clean samples from the mixture, or from one class."""
    if c is not None:
        ks = np.full(n, model.index(c))
    else:
        ks = rng.choice(len(model.classes), size=n, p=model.class_weights)
    chols = np.linalg.cholesky(model.covs)
    z = rng.standard_normal((n, model.dim))
    return model.means[ks] + np.einsum("nij,nj->ni", chols[ks], z)


def labels_of(model: MixtureModel, labels: Sequence[str]) -> np.ndarray:
    return np.array([model.index(c) for c in labels])
