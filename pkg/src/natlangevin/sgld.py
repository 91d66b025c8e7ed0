"""Preconditioned stochastic gradient Langevin dynamics.

One step, with minibatch-mean log-loss gradient ``g``, dataset size ``N``
and preconditioner ``C``::

    g     <- g + grad(-ln prior)(theta) / N
    C     <- update(C)
    theta <- theta - eta * C g + sqrt(2 eta / N) * N(0, C)

followed by the running posterior-mean update and thinned snapshotting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .data import BatchStream, LabeledDataset
from .net import CATEGORICAL
from .params import ParamVector
from .precond import Preconditioner, fisher_sample

DIVERGENCE_NLL = 1e6


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, eta: float, reason: str):
        super().__init__(f"chain diverged at step {step} (eta={eta:g}): {reason}")
        self.step = step
        self.eta = eta
        self.trace: list[dict] = []


@dataclass(frozen=True)
class ConstantHalving:
    """``eta0`` halved every ``halve_every`` steps; ``halve_every=0`` keeps it constant."""

    eta0: float
    halve_every: int = 10_000

    def __call__(self, t: int) -> float:
        if t < 1:
            raise ValueError("steps are counted from 1")
        if not self.halve_every:
            return self.eta0
        return self.eta0 * 0.5 ** ((t - 1) // self.halve_every)


@dataclass(frozen=True)
class Polynomial:
    eta0: float
    exponent: float = -1.0 / 3.0

    def __call__(self, t: int) -> float:
        if t < 1:
            raise ValueError("steps are counted from 1")
        return self.eta0 * t**self.exponent


Schedule = Union[ConstantHalving, Polynomial]


def step_size(schedule: Schedule, t: int) -> float:
    return schedule(t)


@dataclass
class SamplerConfig:
    schedule: Schedule
    updates: int = 0
    batch_size: int = 100
    burn_in: int = 500
    thin: int = 100
    mean_mode: str = "post_burn_in"
    eval_every: int = 1000
    seed: int = 0
    data_seed: int = 1
    adapt_until: Optional[int] = None
    inject_noise: bool = True
    keep_snapshots: bool = True

    def __post_init__(self):
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("need burn_in >= 0 and thin >= 1")
        if self.mean_mode not in ("post_burn_in", "all"):
            raise ValueError(f"unknown mean_mode {self.mean_mode!r}")

    def mean_rate(self, t: int) -> Optional[float]:
        """Weight of the newest sample in the running mean, or None while burning in."""
        if self.mean_mode == "all":
            return 1.0 / t
        if t <= self.burn_in:
            return None
        return 1.0 / (t - self.burn_in)


@dataclass
class Chain:
    theta: ParamVector
    theta_mean: ParamVector
    rng: np.random.Generator
    t: int = 0
    eta: float = float("nan")
    snapshots: list = field(default_factory=list)
    snapshot_count: int = 0
    last_noise: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def start(cls, theta0: ParamVector, seed: int) -> "Chain":
        return cls(theta0.copy(), theta0.copy(), np.random.default_rng([seed, 1]))


@dataclass
class StepInfo:
    loss: float
    correct: Optional[int]
    batch_size: int


def posterior_mean_update(chain: Chain, mu: float) -> None:
    if not 0 < mu <= 1:
        raise ValueError(f"mean weight must lie in (0, 1], got {mu}")
    if mu == 1.0:
        chain.theta_mean.values[:] = chain.theta.values
    else:
        chain.theta_mean.values *= 1.0 - mu
        chain.theta_mean.values += mu * chain.theta.values


def snapshot_due(t: int, burn_in: int, thin: int) -> bool:
    return t > burn_in and (t - burn_in) % thin == 0


def maybe_snapshot(chain: Chain, burn_in: int, thin: int, keep: bool = True, callback=None) -> bool:
    if not snapshot_due(chain.t, burn_in, thin):
        return False
    chain.snapshot_count += 1
    if keep:
        chain.snapshots.append(chain.theta.copy())
    if callback is not None:
        callback(chain.theta)
    return True


def sgld_step(
    chain: Chain,
    precond: Preconditioner,
    model,
    prior,
    batch,
    n_data: int,
    config: SamplerConfig,
    noise: Optional[np.ndarray] = None,
    on_snapshot: Optional[Callable] = None,
) -> StepInfo:
    """Advance the chain by one preconditioned Langevin step on ``batch = (x, y)``.

    ``noise`` replaces the draw from ``N(0, C)`` (used to pin trajectories).
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty minibatch")
    t = chain.t + 1
    eta = config.schedule(t)
    theta = chain.theta.values

    loss, g, cache, per_example = model.loss_and_grad(theta, x, y)
    g = g + prior.grad(theta) / n_data

    if config.adapt_until is not None and t > config.adapt_until:
        precond.freeze()
    if not precond.frozen:
        fisher = None
        if precond.needs_fisher:
            if precond.variant == "op":
                fisher = per_example
            else:
                fisher = fisher_sample(model, theta, x, y, "mc", chain.rng, cache)
        precond.update(g, fisher)
    step = precond.apply(g)

    new = theta - eta * step
    if config.inject_noise:
        xi = precond.noise(chain.rng) if noise is None else np.asarray(noise, dtype=np.float64)
        scaled = math.sqrt(2.0 * eta / n_data) * xi
        new += scaled
        chain.last_noise = scaled
    if not np.isfinite(new).all():
        raise DivergenceError(t, eta, "non-finite parameters")
    if loss > DIVERGENCE_NLL:
        raise DivergenceError(t, eta, f"training NLL {loss:.3g} exceeds {DIVERGENCE_NLL:g}")

    chain.theta.values[:] = new
    chain.t = t
    chain.eta = eta
    mu = config.mean_rate(t)
    if mu is not None:
        posterior_mean_update(chain, mu)
    maybe_snapshot(chain, config.burn_in, config.thin, config.keep_snapshots, on_snapshot)

    correct = None
    if cache is not None and cache.output.head == CATEGORICAL:
        correct = int(np.count_nonzero(cache.output.probs.argmax(axis=1) == np.asarray(y)))
    return StepInfo(loss, correct, len(x))


@dataclass
class ChainResult:
    theta_mean: ParamVector
    snapshots: list
    trace: list[dict]
    chain: Chain


TRACE_COLUMNS = ("step", "eta", "train_nll", "train_acc", "val_nll", "val_acc", "snapshot_count")


def run_chain(
    config: SamplerConfig,
    model,
    train: LabeledDataset,
    precond: Preconditioner,
    prior,
    validation: Optional[LabeledDataset] = None,
    theta0: Optional[ParamVector] = None,
    on_snapshot: Optional[Callable] = None,
    n_data: Optional[int] = None,
) -> ChainResult:
    """Run ``config.updates`` steps over reshuffled minibatches of ``train``.

    Every ``eval_every`` steps a trace row records the interval's mean
    minibatch NLL/accuracy and the current parameters' validation metrics.
    On divergence the partial trace is attached to the raised error.
    """
    from .evaluate import evaluate

    if theta0 is None:
        theta0 = model.init_params(np.random.default_rng([config.seed, 0]))
    chain = Chain.start(theta0, config.seed)
    stream = BatchStream(train, config.batch_size, config.data_seed)
    n_data = n_data or len(train)
    trace: list[dict] = []
    loss_sum = 0.0
    correct_sum = 0
    seen = 0
    categorical = getattr(getattr(model, "arch", None), "head", None) == CATEGORICAL
    try:
        for _ in range(config.updates):
            info = sgld_step(chain, precond, model, prior, next(stream), n_data, config, on_snapshot=on_snapshot)
            loss_sum += info.loss * info.batch_size
            correct_sum += info.correct or 0
            seen += info.batch_size
            if config.eval_every and chain.t % config.eval_every == 0:
                row = {
                    "step": chain.t,
                    "eta": chain.eta,
                    "train_nll": loss_sum / seen,
                    "train_acc": correct_sum / seen if categorical else float("nan"),
                    "val_nll": float("nan"),
                    "val_acc": float("nan"),
                    "snapshot_count": chain.snapshot_count,
                }
                if validation is not None:
                    rep = evaluate(model, chain.theta, validation)
                    row["val_nll"], row["val_acc"] = rep.nll, rep.accuracy
                trace.append(row)
                loss_sum, correct_sum, seen = 0.0, 0, 0
    except DivergenceError as err:
        err.trace = trace
        raise
    return ChainResult(chain.theta_mean, chain.snapshots, trace, chain)
