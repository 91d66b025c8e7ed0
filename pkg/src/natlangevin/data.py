"""Datasets: MNIST IDX files, splits, minibatching, conjugate regression problems."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    targets: np.ndarray
    name: str = "train"

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets differ in length")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx, name: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.targets[idx], name or self.name)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise IDXFormatError("file too short for an IDX header", len(raw), path)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IDXFormatError(f"wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0, path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError("truncated dimension table", len(raw), path)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IDXFormatError(f"truncated data: need {count} bytes, have {len(raw) - header}", len(raw), path)
    if len(raw) > header + count:
        raise IDXFormatError("trailing bytes after data", header + count, path)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), IMAGE_MAGIC, path)


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), LABEL_MAGIC, path)


def load_idx(image_path, label_path, name: str = "train") -> LabeledDataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4, label_path)
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(inputs, labels.astype(np.int64), name)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    array = np.asarray(array, dtype=np.uint8)
    if (magic & 0xFF) != array.ndim:
        raise ValueError(f"magic 0x{magic:08x} declares {magic & 0xFF} dims, array has {array.ndim}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def split(dataset: LabeledDataset, validation, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffled split into (train, validation).

    ``validation`` is a fraction in (0, 1) or an example count; at least one
    example ends up on each side.
    """
    n = len(dataset)
    if isinstance(validation, (int, np.integer)) and not isinstance(validation, bool):
        n_val = int(validation)
    else:
        if not 0 < validation < 1:
            raise ValueError(f"validation fraction must lie in (0, 1), got {validation}")
        n_val = int(round(validation * n))
    n_val = min(max(n_val, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "validation")


def minibatches(dataset: LabeledDataset, size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index arrays for one epoch: a full shuffle, the last batch possibly short."""
    if size < 1:
        raise ValueError("minibatch size must be >= 1")
    perm = rng.permutation(len(dataset))
    for start in range(0, len(perm), size):
        yield perm[start : start + size]


class BatchStream:
    """Endless minibatch indices, reshuffled every epoch from a dedicated generator."""

    def __init__(self, dataset: LabeledDataset, size: int, seed: int):
        self.dataset = dataset
        self.size = min(size, len(dataset))
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._it = iter(())

    def next_indices(self) -> np.ndarray:
        idx = next(self._it, None)
        if idx is None:
            self.epoch += 1
            self._it = minibatches(self.dataset, self.size, self.rng)
            idx = next(self._it)
        return idx

    def __iter__(self):
        return self

    def __next__(self):
        idx = self.next_indices()
        return self.dataset.inputs[idx], self.dataset.targets[idx]


@dataclass
class ConjugateRegressionProblem:
    """Linear regression ``y = X theta + N(0, noise_var)`` with prior ``N(0, diag(prior_var))``."""

    X: np.ndarray
    y: np.ndarray
    noise_var: float
    prior_var: np.ndarray
    post_mean: np.ndarray
    post_cov: np.ndarray
    theta_true: Optional[np.ndarray] = None

    @classmethod
    def from_arrays(cls, X, y, noise_var: float, prior_var, theta_true=None) -> "ConjugateRegressionProblem":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        d = X.shape[1]
        prior_var = np.broadcast_to(np.asarray(prior_var, dtype=np.float64), (d,)).copy()
        if not noise_var > 0 or not np.all(prior_var > 0):
            raise ValueError("variances must be positive")
        mean, cov = posterior(X, y, noise_var, prior_var)
        return cls(X, y, float(noise_var), prior_var, mean, cov, theta_true)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def precision(self) -> np.ndarray:
        return np.diag(1.0 / self.prior_var) + self.X.T @ self.X / self.noise_var

    def as_dataset(self) -> LabeledDataset:
        """Regression data for a linear net whose bias plays the intercept (column 0 of X)."""
        if self.d < 2 or not np.all(self.X[:, 0] == 1.0):
            raise ValueError("network form needs an intercept column of ones first")
        return LabeledDataset(self.X[:, 1:].copy(), self.y[:, None].copy(), "conjugate")

    def save(self, path) -> None:
        np.savez(
            path,
            X=self.X,
            y=self.y,
            noise_var=self.noise_var,
            prior_var=self.prior_var,
            post_mean=self.post_mean,
            post_cov=self.post_cov,
            theta_true=self.theta_true if self.theta_true is not None else np.array([]),
        )

    @classmethod
    def load(cls, path) -> "ConjugateRegressionProblem":
        with np.load(path) as z:
            theta = z["theta_true"]
            return cls(
                z["X"], z["y"], float(z["noise_var"]), z["prior_var"], z["post_mean"], z["post_cov"],
                theta if theta.size else None,
            )


def posterior(X, y, noise_var: float, prior_var) -> tuple[np.ndarray, np.ndarray]:
    precision = np.diag(1.0 / np.asarray(prior_var, dtype=np.float64)) + X.T @ X / noise_var
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (X.T @ y) / noise_var
    return mean, cov


def make_conjugate_problem(
    n: int, d: int, noise_var: float, prior_var=1.0, seed: int = 0, intercept: bool = False
) -> ConjugateRegressionProblem:
    """Draw a design, a true parameter from the prior and noisy targets; store the exact posterior."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    if intercept:
        X[:, 0] = 1.0
    pv = np.broadcast_to(np.asarray(prior_var, dtype=np.float64), (d,))
    theta = np.sqrt(pv) * rng.standard_normal(d)
    y = X @ theta + np.sqrt(noise_var) * rng.standard_normal(n)
    return ConjugateRegressionProblem.from_arrays(X, y, noise_var, pv, theta)
