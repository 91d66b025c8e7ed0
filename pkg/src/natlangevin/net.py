"""Feedforward ReLU networks on a flat block-structured parameter vector.

Layer ``l`` with ``m`` units and ``n`` inputs stores an ``(m, n + 1)`` matrix
row-major: row ``i`` is unit ``i``'s block ``[bias, w_1, ..., w_n]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .params import BlockLayout, ParamVector

CATEGORICAL = "categorical"
GAUSSIAN = "gaussian"


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite activations in layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class Architecture:
    """Layer widths from input to output, plus the output head.

    ``sigma`` is the fixed noise scale of the Gaussian head and is ignored
    for the categorical head. Zero hidden layers gives a linear model.
    """

    layer_sizes: tuple[int, ...]
    head: str = CATEGORICAL
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if min(self.layer_sizes) < 1:
            raise ValueError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.head not in (CATEGORICAL, GAUSSIAN):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == GAUSSIAN and not self.sigma >= 0:
            raise ValueError(f"Gaussian head needs sigma >= 0, got {self.sigma}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def layout(self) -> BlockLayout:
        return BlockLayout.dense_layers(self.layer_sizes)


@dataclass
class PredictiveOutput:
    """Per-example predictive distributions.

    Categorical: ``probs`` (rows sum to 1) and ``log_probs``. Gaussian:
    ``mean`` and the shared ``sigma``.
    """

    head: str
    probs: Optional[np.ndarray] = None
    log_probs: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    sigma: float = 1.0

    def __len__(self):
        arr = self.probs if self.head == CATEGORICAL else self.mean
        return arr.shape[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_example_loss(out: PredictiveOutput, y) -> np.ndarray:
    """Negative log-likelihood of each target, in nats."""
    if out.head == CATEGORICAL:
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != out.log_probs.shape[0]:
            raise ValueError("categorical targets must be one label per example")
        k = out.log_probs.shape[1]
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"labels out of range [0, {k})")
        return -out.log_probs[np.arange(y.shape[0]), y]
    if not out.sigma > 0:
        raise ValueError(f"Gaussian log-loss needs sigma > 0, got {out.sigma}")
    y = _as_targets(y, out.mean)
    resid = y - out.mean
    return (resid * resid).sum(axis=1) / (2.0 * out.sigma**2) + out.mean.shape[1] * np.log(out.sigma)


def log_loss(out: PredictiveOutput, y) -> float:
    """Mean log-loss over the examples in ``out``."""
    return float(per_example_loss(out, y).mean())


def _as_targets(y, like: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1 and like.shape[1] == 1:
        y = y[:, None]
    if y.shape != like.shape:
        raise ValueError(f"target shape {y.shape} does not match prediction shape {like.shape}")
    return y


@dataclass
class PerExampleGrads:
    """Per-example log-loss gradients in factored form.

    For layer ``l`` the gradient of example ``k`` is ``outer(deltas[l][k],
    [1, inputs[l][k]])``; nothing of size ``batch x dim`` is formed unless
    :meth:`dense` is called.
    """

    inputs: list[np.ndarray]
    deltas: list[np.ndarray]
    layer_offsets: list[int]
    dim: int

    @property
    def batch_size(self) -> int:
        return self.deltas[0].shape[0]

    def mean(self) -> np.ndarray:
        out = np.empty(self.dim)
        b = self.batch_size
        for a, d, off in zip(self.inputs, self.deltas, self.layer_offsets):
            m, n = d.shape[1], a.shape[1]
            w = out[off : off + m * (n + 1)].reshape(m, n + 1)
            w[:, 0] = d.sum(axis=0) / b
            w[:, 1:] = (d.T @ a) / b
        return out

    def dense(self) -> np.ndarray:
        rows = []
        for a, d in zip(self.inputs, self.deltas):
            aug = np.hstack([np.ones((a.shape[0], 1)), a])
            rows.append((d[:, :, None] * aug[:, None, :]).reshape(a.shape[0], -1))
        return np.hstack(rows)

    def weighted_square(self, weights: np.ndarray) -> np.ndarray:
        """``sum_k w_k v_k**2`` elementwise."""
        out = np.empty(self.dim)
        for a, d, off in zip(self.inputs, self.deltas, self.layer_offsets):
            m, n = d.shape[1], a.shape[1]
            wd2 = weights[:, None] * d * d
            blk = out[off : off + m * (n + 1)].reshape(m, n + 1)
            blk[:, 0] = wd2.sum(axis=0)
            blk[:, 1:] = wd2.T @ (a * a)
        return out

    def weighted_first_row(self, weights: np.ndarray) -> np.ndarray:
        """``sum_k w_k v_k[b0] v_k[b]`` within every block, ``b0`` the block's bias index."""
        out = np.empty(self.dim)
        for a, d, off in zip(self.inputs, self.deltas, self.layer_offsets):
            m, n = d.shape[1], a.shape[1]
            wd2 = weights[:, None] * d * d
            blk = out[off : off + m * (n + 1)].reshape(m, n + 1)
            blk[:, 0] = wd2.sum(axis=0)
            blk[:, 1:] = wd2.T @ a
        return out

    def weighted_outer(self, weights: np.ndarray) -> np.ndarray:
        v = self.dense()
        return (v * weights[:, None]).T @ v


@dataclass
class ForwardCache:
    activations: list[np.ndarray]
    output: PredictiveOutput
    pre_output: np.ndarray = field(repr=False)


class Network:
    """A feedforward ReLU network bound to an :class:`Architecture`."""

    def __init__(self, arch: Architecture):
        self.arch = arch
        self.layout = arch.layout()
        self.layer_offsets = []
        off = 0
        for n, m in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
            self.layer_offsets.append(off)
            off += m * (n + 1)
        self.dim = off

    def _weights(self, theta: np.ndarray) -> list[np.ndarray]:
        mats = []
        for off, n, m in zip(self.layer_offsets, self.arch.layer_sizes[:-1], self.arch.layer_sizes[1:]):
            mats.append(theta[off : off + m * (n + 1)].reshape(m, n + 1))
        return mats

    @staticmethod
    def _values(theta) -> np.ndarray:
        return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        """Gaussian weights with variance 1/fan-in, zero biases."""
        theta = np.zeros(self.dim)
        for w in self._weights(theta):
            fan_in = w.shape[1] - 1
            w[:, 1:] = rng.standard_normal((w.shape[0], fan_in)) / np.sqrt(fan_in)
        return ParamVector(theta, self.layout)

    def forward_cache(self, theta, x: np.ndarray) -> ForwardCache:
        theta = self._values(theta)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.arch.n_inputs:
            raise ValueError(f"input batch must have shape (B, {self.arch.n_inputs}), got {x.shape}")
        acts = [x]
        h = x
        mats = self._weights(theta)
        for l, w in enumerate(mats):
            with np.errstate(over="ignore", invalid="ignore"):
                z = h @ w[:, 1:].T
                z += w[:, 0]
            if l < len(mats) - 1:
                np.maximum(z, 0.0, out=z)
                if not np.isfinite(z).all():
                    raise NonFiniteActivation(l)
                acts.append(z)
                h = z
            else:
                if not np.isfinite(z).all():
                    raise NonFiniteActivation(l)
                pre = z
        if self.arch.head == CATEGORICAL:
            lp = log_softmax(pre)
            out = PredictiveOutput(CATEGORICAL, probs=np.exp(lp), log_probs=lp)
        else:
            out = PredictiveOutput(GAUSSIAN, mean=pre, sigma=self.arch.sigma)
        return ForwardCache(acts, out, pre)

    def forward(self, theta, x) -> PredictiveOutput:
        return self.forward_cache(theta, x).output

    def output_delta(self, out: PredictiveOutput, y) -> np.ndarray:
        """Per-example derivative of the log-loss w.r.t. the output pre-activations."""
        if out.head == CATEGORICAL:
            y = np.asarray(y)
            delta = out.probs.copy()
            delta[np.arange(y.shape[0]), y] -= 1.0
            return delta
        y = _as_targets(y, out.mean)
        resid = out.mean - y
        if out.sigma > 0:
            return resid / out.sigma**2
        if np.any(resid != 0):
            raise ValueError("sigma = 0 with a non-zero residual has no finite gradient")
        return np.zeros_like(resid)

    def backward(self, theta, cache: ForwardCache, y) -> PerExampleGrads:
        """Backpropagate the per-example output deltas for targets ``y``."""
        mats = self._weights(self._values(theta))
        delta = self.output_delta(cache.output, y)
        deltas = [delta]
        for l in range(self.arch.n_layers - 1, 0, -1):
            w = mats[l]
            delta = delta @ w[:, 1:]
            delta *= cache.activations[l] > 0
            deltas.append(delta)
        deltas.reverse()
        return PerExampleGrads(cache.activations, deltas, self.layer_offsets, self.dim)

    def per_example_grads(self, theta, x, y, cache: ForwardCache | None = None) -> PerExampleGrads:
        if cache is None:
            cache = self.forward_cache(theta, x)
        return self.backward(theta, cache, y)

    def loss_and_grad(self, theta, x, y):
        """Mean log-loss, its gradient and the per-example factors of a minibatch."""
        cache = self.forward_cache(theta, x)
        losses = per_example_loss(cache.output, y)
        pe = self.per_example_grads(theta, x, y, cache)
        return float(losses.mean()), pe.mean(), cache, pe

    def minibatch_gradient(self, theta, x, y) -> ParamVector:
        if len(x) == 0:
            raise ValueError("empty minibatch")
        _, g, _, _ = self.loss_and_grad(theta, x, y)
        return ParamVector(g, self.layout)

    def sample_output(self, theta, x, rng: np.random.Generator, out: PredictiveOutput | None = None):
        """Draw one synthetic target per example from the model's predictive distribution."""
        if out is None:
            out = self.forward(theta, x)
        return sample_from(out, rng)

    def mean_loss(self, theta, x, y) -> float:
        return log_loss(self.forward(theta, x), y)


def sample_from(out: PredictiveOutput, rng: np.random.Generator) -> np.ndarray:
    if out.head == CATEGORICAL:
        cdf = np.cumsum(out.probs, axis=1)
        u = rng.random(cdf.shape[0]) * cdf[:, -1]
        labels = (cdf <= u[:, None]).sum(axis=1)
        return np.minimum(labels, out.probs.shape[1] - 1)
    noise = rng.standard_normal(out.mean.shape)
    return out.mean + out.sigma * noise


def init_params(arch: Architecture, rng: np.random.Generator) -> ParamVector:
    return Network(arch).init_params(rng)


def forward(arch: Architecture, theta, x) -> PredictiveOutput:
    return Network(arch).forward(theta, x)


def minibatch_gradient(arch: Architecture, theta, x, y) -> ParamVector:
    return Network(arch).minibatch_gradient(theta, x, y)


def sample_output(arch: Architecture, theta, x, rng: np.random.Generator) -> np.ndarray:
    return Network(arch).sample_output(theta, x, rng)


def architecture(sizes: Sequence[int], head: str = CATEGORICAL, sigma: float = 1.0) -> Architecture:
    return Architecture(tuple(sizes), head, sigma)
