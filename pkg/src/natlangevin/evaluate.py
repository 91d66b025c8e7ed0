"""Metrics, posterior-ensemble prediction and sample-moment diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import LabeledDataset
from .net import CATEGORICAL, GAUSSIAN, PredictiveOutput, per_example_loss

CHUNK = 10_000


@dataclass(frozen=True)
class MetricsReport:
    nll: float
    accuracy: float


def accuracy(probs: np.ndarray, labels) -> float:
    """Fraction of argmax hits; ties go to the lowest class index."""
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def report(out: PredictiveOutput, y) -> MetricsReport:
    nll = float(per_example_loss(out, y).mean())
    acc = accuracy(out.probs, y) if out.head == CATEGORICAL else float("nan")
    return MetricsReport(nll, acc)


def _chunks(n: int, size: int = CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predict(model, theta, x: np.ndarray) -> PredictiveOutput:
    """Forward pass in chunks; identical to a single pass up to memory use."""
    parts = [model.forward(theta, x[sl]) for sl in _chunks(len(x))]
    if len(parts) == 1:
        return parts[0]
    head = parts[0].head
    if head == CATEGORICAL:
        return PredictiveOutput(
            head,
            probs=np.concatenate([p.probs for p in parts]),
            log_probs=np.concatenate([p.log_probs for p in parts]),
        )
    return PredictiveOutput(head, mean=np.concatenate([p.mean for p in parts]), sigma=parts[0].sigma)


def evaluate(model, theta, dataset: LabeledDataset) -> MetricsReport:
    return report(predict(model, theta, dataset.inputs), dataset.targets)


def mixture_output(outputs: Sequence[PredictiveOutput]) -> PredictiveOutput:
    """Average of member predictive distributions (means only for the Gaussian head)."""
    if not outputs:
        raise ValueError("an ensemble needs at least one member")
    head = outputs[0].head
    if head == CATEGORICAL:
        # log-mean-exp so members that put tiny mass on the label stay finite
        logp = logsumexp([o.log_probs for o in outputs], axis=0) - np.log(len(outputs))
        logp -= logsumexp(logp, axis=1, keepdims=True)
        return PredictiveOutput(head, probs=np.exp(logp), log_probs=logp)
    return PredictiveOutput(GAUSSIAN, mean=np.mean([o.mean for o in outputs], axis=0), sigma=outputs[0].sigma)


@dataclass
class EnsembleModel:
    model: object
    snapshots: list

    def __post_init__(self):
        if not self.snapshots:
            raise ValueError("an ensemble needs at least one member")
        layout = getattr(self.snapshots[0], "layout", None)
        if any(getattr(s, "layout", None) != layout for s in self.snapshots):
            raise ValueError("ensemble members must share a layout")


def ensemble_predict(ensemble: EnsembleModel, x: np.ndarray) -> PredictiveOutput:
    if len(ensemble.snapshots) == 1:
        return predict(ensemble.model, ensemble.snapshots[0], x)
    return mixture_output([predict(ensemble.model, s, x) for s in ensemble.snapshots])


class EnsembleAccumulator:
    """Streams ensemble members into running prediction sums on fixed datasets.

    Avoids keeping every snapshot in memory: each member is evaluated once
    when it arrives. Also tracks the members' own mean NLL, which bounds the
    ensemble NLL from above.
    """

    def __init__(self, model, datasets: Mapping[str, LabeledDataset]):
        self.model = model
        self.datasets = dict(datasets)
        self.count = 0
        self._sums = {name: None for name in self.datasets}
        self._member_nll = {name: 0.0 for name in self.datasets}
        self.sigma = None

    def add(self, theta) -> None:
        for name, ds in self.datasets.items():
            out = predict(self.model, theta, ds.inputs)
            if out.head == CATEGORICAL:
                acc = self._sums[name]
                self._sums[name] = out.log_probs.copy() if acc is None else np.logaddexp(acc, out.log_probs)
            elif self._sums[name] is None:
                self._sums[name] = out.mean.copy()
            else:
                self._sums[name] += out.mean
            self._member_nll[name] += float(per_example_loss(out, ds.targets).mean())
            self.sigma = out.sigma
        self.count += 1

    __call__ = add

    def output(self, name: str) -> PredictiveOutput:
        if self.count == 0:
            raise ValueError("no ensemble members yet")
        if self.model.arch.head == CATEGORICAL:
            logp = self._sums[name] - np.log(self.count)
            logp = logp - logsumexp(logp, axis=1, keepdims=True)
            return PredictiveOutput(CATEGORICAL, probs=np.exp(logp), log_probs=logp)
        avg = self._sums[name] / self.count
        return PredictiveOutput(GAUSSIAN, mean=avg, sigma=self.sigma)

    def metrics(self, name: str) -> MetricsReport:
        return report(self.output(name), self.datasets[name].targets)

    def mean_member_nll(self, name: str) -> float:
        return self._member_nll[name] / self.count


def sample_moments(snapshots: Iterable, coords: Optional[Sequence[int]] = None):
    """Sample mean and unbiased covariance (divisor K - 1), optionally on a subset of coordinates."""
    rows = np.array([getattr(s, "values", s) for s in snapshots], dtype=np.float64)
    if coords is not None:
        rows = rows[:, list(coords)]
    k = rows.shape[0]
    if k < 2:
        raise ValueError("covariance needs at least two samples")
    mean = rows.mean(axis=0)
    centered = rows - mean
    return mean, centered.T @ centered / (k - 1)


def batch_means_stderr(samples: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Monte-Carlo standard error of the mean of an autocorrelated chain (batch means)."""
    samples = np.asarray(samples, dtype=np.float64)
    size = samples.shape[0] // n_batches
    if size < 1:
        raise ValueError("not enough samples for the requested number of batches")
    means = samples[: size * n_batches].reshape(n_batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)
