"""Priors over the flat parameter vector.

The sampler only needs ``grad(-ln prior)``; the normal-inverse-gamma prior is
used through its per-coordinate Student-t marginal so no variance has to be
carried in the chain state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import gammaln

from .params import BlockLayout, ParamVector

ArrayOrScalar = Union[float, np.ndarray]


def _vals(theta) -> np.ndarray:
    return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)


@dataclass(frozen=True)
class GaussianPrior:
    """Independent ``N(mean_i, var_i)`` per coordinate."""

    var: ArrayOrScalar = 1.0
    mean: ArrayOrScalar = 0.0

    def __post_init__(self):
        if not np.all(np.asarray(self.var) > 0):
            raise ValueError("Gaussian prior variance must be > 0")

    def grad(self, theta) -> np.ndarray:
        return (_vals(theta) - self.mean) / self.var

    def neg_log_density(self, theta) -> float:
        t = _vals(theta)
        var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), t.shape)
        return float(0.5 * np.sum((t - self.mean) ** 2 / var + np.log(2 * np.pi * var)))

    def sample(self, layout: BlockLayout, rng: np.random.Generator) -> ParamVector:
        z = rng.standard_normal(layout.dim)
        return ParamVector(self.mean + np.sqrt(self.var) * z, layout)


@dataclass(frozen=True)
class NormalInverseGammaPrior:
    """``theta_i | s2 ~ N(0, s2)``, ``s2 ~ InvGamma(alpha, beta)``, independently per coordinate."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("normal-inverse-gamma needs alpha > 0 and beta > 0")

    def grad(self, theta) -> np.ndarray:
        t = _vals(theta)
        return (self.alpha + 0.5) * t / (self.beta + 0.5 * t * t)

    def neg_log_density(self, theta) -> float:
        t = _vals(theta)
        a, b = self.alpha, self.beta
        log_norm = gammaln(a + 0.5) - gammaln(a) - 0.5 * np.log(2 * np.pi * b)
        return float(np.sum((a + 0.5) * np.log1p(t * t / (2 * b)) - log_norm))

    def sample(self, layout: BlockLayout, rng: np.random.Generator) -> ParamVector:
        s2 = 1.0 / rng.gamma(self.alpha, 1.0 / self.beta, size=layout.dim)
        return ParamVector(np.sqrt(s2) * rng.standard_normal(layout.dim), layout)


@dataclass(frozen=True)
class FlatPrior:
    """Improper constant prior; turns the sampler into plain (noisy) SGD."""

    def grad(self, theta) -> np.ndarray:
        return np.zeros_like(_vals(theta))

    def neg_log_density(self, theta) -> float:
        return 0.0

    def sample(self, layout, rng):
        raise ValueError("cannot sample from a flat prior")


Prior = Union[GaussianPrior, NormalInverseGammaPrior, FlatPrior]


def neg_log_prior_grad(prior: Prior, theta) -> ParamVector:
    if isinstance(theta, ParamVector):
        return ParamVector(prior.grad(theta), theta.layout)
    return prior.grad(theta)


def sample_prior(prior: Prior, layout: BlockLayout, rng: np.random.Generator) -> ParamVector:
    return prior.sample(layout, rng)


def make_prior(kind: str, *, var: float = 1.0, alpha: float = 1.0, beta: float = 1.0) -> Prior:
    if kind == "gaussian":
        return GaussianPrior(var=var)
    if kind == "nig":
        return NormalInverseGammaPrior(alpha=alpha, beta=beta)
    if kind == "none":
        return FlatPrior()
    raise ValueError(f"unknown prior kind {kind!r}")
