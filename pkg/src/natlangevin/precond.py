"""Preconditioners for Langevin dynamics.

A preconditioner represents a symmetric positive-definite matrix ``C`` and
provides the four routines the sampler needs: initialization, an update from
recent gradients, multiplication ``g -> C g`` and sampling from ``N(0, C)``.

Kinds:

* ``identity``  -- ``C = I``.
* ``rmsprop``   -- ``C = (D + eps)^(-1/2)``, ``D`` a moving average of ``g**2``.
* ``fisher``    -- ``C = (J + eps I)^(-1)`` with a dense moving-average Fisher ``J``.
* ``dop``       -- ``C = (diag J + eps)^(-1)``.
* ``qdop``      -- quasi-diagonal: per block, ``C = A A^T`` where ``A`` is the
  sparse factor reproducing the diagonal and first row of ``J + eps I``.

Fisher-based kinds are fed per-example gradients, taken at the dataset
targets (``op`` variant) or at outputs sampled from the model (``mc``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import kernels
from .net import Network, PerExampleGrads, sample_from
from .params import BlockLayout, load_arrays, save_arrays

KINDS = ("identity", "rmsprop", "fisher", "dop", "qdop")
FISHER_VARIANTS = ("op", "mc")
BATCH_MODES = ("per_example", "per_example_step_rate", "mean_gradient", "mean_outer")
QD_MAGIC = b"LBNQ"


class PreconditionerError(FloatingPointError):
    pass


def inv_sqrt_decay(t: int) -> float:
    return 1.0 / np.sqrt(t)


def constant_decay(rate: float) -> Callable[[int], float]:
    if not 0 < rate <= 1:
        raise ValueError("decay rate must lie in (0, 1]")
    return lambda t: rate


def _check_gamma(gamma: float) -> None:
    if not 0 < gamma <= 1:
        raise ValueError(f"decay rate must lie in (0, 1], got {gamma}")


# --- Fisher samples -------------------------------------------------------


def fisher_sample(net: Network, theta, x, y, variant: str, rng: np.random.Generator, cache=None) -> PerExampleGrads:
    """Per-example gradients feeding a Fisher estimate.

    ``op`` uses the dataset targets ``y``; ``mc`` draws targets from the
    model's own predictive distribution at ``x``.
    """
    if variant not in FISHER_VARIANTS:
        raise ValueError(f"unknown Fisher variant {variant!r}")
    if cache is None:
        cache = net.forward_cache(theta, x)
    targets = y if variant == "op" else sample_from(cache.output, rng)
    return net.backward(theta, cache, targets)


def fisher_vector(net: Network, theta, x, y, variant: str, rng: np.random.Generator) -> np.ndarray:
    """Dense per-example Fisher vectors, one row per example in ``x``."""
    return fisher_sample(net, theta, x, y, variant, rng).dense()


@dataclass
class FisherBatch:
    """Per-example vectors of one minibatch and how they enter a moving average.

    The update is ``J <- decay * J + sum_k weights[k] * v_k v_k^T``.
    ``per_example`` chains one rank-one update per example, example ``k``
    using rate ``gamma[k]`` (a scalar means one rate for all);
    ``mean_outer`` makes a single update with the mean outer product;
    ``mean_gradient`` a single rank-one update with the mean vector.
    """

    decay: float
    weights: np.ndarray
    grads: Optional[PerExampleGrads] = None
    vectors: Optional[np.ndarray] = None

    @classmethod
    def build(cls, source, gamma, mode: str = "per_example") -> "FisherBatch":
        if mode not in BATCH_MODES:
            raise ValueError(f"unknown Fisher batch mode {mode!r}")
        if isinstance(source, PerExampleGrads):
            grads, vectors, b = source, None, source.batch_size
        else:
            grads, vectors = None, np.atleast_2d(np.asarray(source, dtype=np.float64))
            b = vectors.shape[0]
        gammas = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (b,))
        if not np.all((gammas > 0) & (gammas <= 1)):
            raise ValueError("decay rates must lie in (0, 1]")
        if mode == "mean_gradient":
            g0 = float(gammas[0])
            mean = grads.mean() if grads is not None else vectors.mean(axis=0)
            return cls(1.0 - g0, np.array([g0]), vectors=mean[None, :])
        if mode == "mean_outer":
            g0 = float(gammas[0])
            return cls(1.0 - g0, np.full(b, g0 / b), grads, vectors)
        keep = 1.0 - gammas
        # later[k] = prod_{j > k} keep[j]
        later = np.append(np.cumprod(keep[:0:-1])[::-1], 1.0)
        return cls(float(np.prod(keep)), gammas * later, grads, vectors)

    def square(self) -> np.ndarray:
        if self.grads is not None:
            return self.grads.weighted_square(self.weights)
        return self.weights @ (self.vectors * self.vectors)

    def first_row(self, layout: BlockLayout) -> np.ndarray:
        if self.grads is not None:
            return self.grads.weighted_first_row(self.weights)
        v = self.vectors
        heads = v[:, layout.offsets_array]
        head_per_coord = np.repeat(heads, layout.sizes_array, axis=1)
        return self.weights @ (head_per_coord * v)

    def outer(self) -> np.ndarray:
        if self.grads is not None:
            return self.grads.weighted_outer(self.weights)
        v = self.vectors
        return (v * self.weights[:, None]).T @ v


# --- functional routines ----------------------------------------------------


def rmsprop_update(D: np.ndarray, g: np.ndarray, gamma: float) -> np.ndarray:
    _check_gamma(gamma)
    return (1.0 - gamma) * D + gamma * g * g


def _guarded(D: np.ndarray, eps: float) -> np.ndarray:
    s = D + eps
    if not np.all(s > 0):
        raise PreconditionerError("zero or negative diagonal entry with eps = 0")
    return s


def rmsprop_apply(D: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    return g / np.sqrt(_guarded(D, eps))


def rmsprop_noise(D: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    return _guarded(D, eps) ** -0.25 * rng.standard_normal(D.shape[0])


def dop_update(D: np.ndarray, v: np.ndarray, gamma: float) -> np.ndarray:
    return rmsprop_update(D, v, gamma)


def dop_apply(D: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    return g / _guarded(D, eps)


def dop_noise(D: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    return _guarded(D, eps) ** -0.5 * rng.standard_normal(D.shape[0])


def fisher_update(J: np.ndarray, v: np.ndarray, gamma: float) -> np.ndarray:
    _check_gamma(gamma)
    return (1.0 - gamma) * J + gamma * np.outer(v, v)


def _regularized(J: np.ndarray, eps: float) -> np.ndarray:
    M = J + eps * np.eye(J.shape[0])
    return 0.5 * (M + M.T)


def fisher_apply(J: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(_regularized(J, eps), lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise PreconditionerError(_fisher_diagnostics(J, eps)) from exc
    return scipy.linalg.cho_solve(factor, v)


def _inv_sqrt(M: np.ndarray, J: np.ndarray, eps: float) -> np.ndarray:
    evals, evecs = np.linalg.eigh(M)
    if not evals.min() > 0:
        raise PreconditionerError(_fisher_diagnostics(J, eps))
    return (evecs * evals**-0.5) @ evecs.T


def fisher_noise(J: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    root = _inv_sqrt(_regularized(J, eps), J, eps)
    return root @ rng.standard_normal(J.shape[0])


def _fisher_diagnostics(J: np.ndarray, eps: float) -> str:
    if not np.isfinite(J).all():
        return "Fisher matrix has non-finite entries"
    evals = np.linalg.eigvalsh(0.5 * (J + J.T))
    return f"J + eps*I is not positive definite: eps={eps}, min eigenvalue of J={evals.min():.3e}"


@dataclass
class QDFactor:
    """Sparse factor: ``adiag`` holds the diagonal, ``arow`` the first row of every block."""

    adiag: np.ndarray
    arow: np.ndarray
    n_clamped: int = 0

    def dense_block(self, layout: BlockLayout, b: int) -> np.ndarray:
        sl = layout.block_slice(b)
        A = np.diag(self.adiag[sl])
        A[0, 1:] = self.arow[sl][1:]
        return A


def qd_cholesky(diag, row0, eps: float, layout: BlockLayout | None = None, backend=None) -> QDFactor:
    """Quasi-diagonal Cholesky factor of ``J + eps I`` from its diagonal and first rows.

    Non-positive radicands are clamped to ``eps`` (``1e-12`` if ``eps == 0``)
    and counted in ``n_clamped``.
    """
    diag = np.ascontiguousarray(diag, dtype=np.float64)
    row0 = np.ascontiguousarray(row0, dtype=np.float64)
    if layout is None:
        layout = BlockLayout.from_sizes([diag.shape[0]])
    if eps < 0:
        raise ValueError("eps must be >= 0")
    backend = backend or kernels.get_backend()
    adiag = np.empty_like(diag)
    arow = np.empty_like(diag)
    floor = eps if eps > 0 else 1e-12
    n_clamped, bad = backend.qd_factor(diag, row0, eps, floor, layout, adiag, arow)
    if bad >= 0:
        raise PreconditionerError(f"quasi-diagonal factorization failed in block {bad}: non-finite entries")
    return QDFactor(adiag, arow, int(n_clamped))


@dataclass
class QDState:
    layout: BlockLayout
    diag: np.ndarray
    row0: np.ndarray
    eps: float = 1e-4
    factor: Optional[QDFactor] = field(default=None, repr=False)
    n_clamped: int = 0

    @classmethod
    def identity(cls, layout: BlockLayout, eps: float = 1e-4) -> "QDState":
        row0 = np.zeros(layout.dim)
        row0[layout.offsets_array] = 1.0
        return cls(layout, np.ones(layout.dim), row0, eps)

    def refactor(self, backend=None) -> QDFactor:
        if self.factor is None:
            self.factor = qd_cholesky(self.diag, self.row0, self.eps, self.layout, backend)
            self.n_clamped += self.factor.n_clamped
        return self.factor

    def save(self, path) -> None:
        save_arrays(path, self.layout, [self.diag, self.row0], QD_MAGIC, scalars=[self.eps])

    @classmethod
    def load(cls, path) -> "QDState":
        layout, scalars, (diag, row0) = load_arrays(path, QD_MAGIC)
        return cls(layout, diag, row0, scalars[0])


def qd_update(state: QDState, v: np.ndarray, gamma: float, backend=None) -> QDState:
    """Rank-one moving-average update of the stored diagonal and first rows."""
    _check_gamma(gamma)
    backend = backend or kernels.get_backend()
    backend.qd_rank_one(state.diag, state.row0, np.ascontiguousarray(v, dtype=np.float64), gamma, state.layout)
    state.factor = None
    return state


def qd_apply(state: QDState, g: np.ndarray, backend=None) -> np.ndarray:
    backend = backend or kernels.get_backend()
    f = state.refactor(backend)
    return backend.qd_apply(f.adiag, f.arow, np.ascontiguousarray(g, dtype=np.float64), state.layout)


def qd_noise(state: QDState, rng: np.random.Generator, backend=None) -> np.ndarray:
    backend = backend or kernels.get_backend()
    f = state.refactor(backend)
    return backend.qd_lower(f.adiag, f.arow, rng.standard_normal(state.layout.dim), state.layout)


# --- preconditioner objects -------------------------------------------------


class Preconditioner:
    """Base class; subclasses implement ``_update``, ``apply``, ``noise``."""

    kind = "base"
    needs_fisher = False

    def __init__(self, layout: BlockLayout, eps: float = 1e-4, decay: Callable[[int], float] = inv_sqrt_decay):
        if eps < 0:
            raise ValueError(f"eps must be >= 0, got {eps}")
        self.layout = layout
        self.eps = float(eps)
        self.decay = decay
        self.t = 0
        self.frozen = False

    @property
    def dim(self) -> int:
        return self.layout.dim

    def freeze(self) -> None:
        """Stop adapting; ``C`` stays fixed from now on."""
        self.frozen = True

    def update(self, g: np.ndarray, fisher: Optional[PerExampleGrads] = None) -> None:
        if self.frozen:
            return
        self.t += 1
        self._update(g, fisher)

    def _update(self, g, fisher):
        pass

    def apply(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def noise(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def matrix(self) -> np.ndarray:
        """Dense ``C``, built column by column through :meth:`apply`."""
        return np.column_stack([self.apply(e) for e in np.eye(self.dim)])


class Identity(Preconditioner):
    kind = "identity"

    def apply(self, g):
        return np.array(g, dtype=np.float64)

    def noise(self, rng):
        return rng.standard_normal(self.dim)


class RMSProp(Preconditioner):
    kind = "rmsprop"

    def __init__(self, layout, eps=1e-4, decay=inv_sqrt_decay):
        super().__init__(layout, eps, decay)
        self.D = np.ones(layout.dim)

    def _update(self, g, fisher):
        self.D = rmsprop_update(self.D, g, self.decay(self.t))

    def apply(self, g):
        return rmsprop_apply(self.D, g, self.eps)

    def noise(self, rng):
        return rmsprop_noise(self.D, self.eps, rng)


class _FisherBased(Preconditioner):
    needs_fisher = True

    def __init__(self, layout, eps=1e-4, decay=inv_sqrt_decay, variant="op", batch_mode="mean_outer"):
        super().__init__(layout, eps, decay)
        if variant not in FISHER_VARIANTS:
            raise ValueError(f"unknown Fisher variant {variant!r}")
        if batch_mode not in BATCH_MODES:
            raise ValueError(f"unknown Fisher batch mode {batch_mode!r}")
        self.variant = variant
        self.batch_mode = batch_mode
        self.n_rank_one = 0

    def _rates(self, b: int):
        """Decay rate(s) for this update.

        In ``per_example`` mode every example is one rank-one update and the
        rate follows the running count of those updates, so a single
        sample per step reproduces the one-example recursion exactly.
        """
        if self.batch_mode == "per_example":
            ks = np.arange(self.n_rank_one + 1, self.n_rank_one + b + 1)
            self.n_rank_one += b
            return np.asarray(self.decay(ks), dtype=np.float64)
        self.n_rank_one += b if self.batch_mode != "mean_gradient" else 1
        return self.decay(self.t)

    def _update(self, g, fisher):
        if fisher is None:
            raise ValueError(f"{self.kind} preconditioner needs per-example Fisher vectors")
        b = fisher.batch_size if isinstance(fisher, PerExampleGrads) else np.atleast_2d(fisher).shape[0]
        mode = "per_example" if self.batch_mode == "per_example_step_rate" else self.batch_mode
        self._absorb(FisherBatch.build(fisher, self._rates(b), mode))


class DiagonalOP(_FisherBased):
    kind = "dop"

    def __init__(self, layout, eps=1e-4, decay=inv_sqrt_decay, variant="op", batch_mode="mean_outer"):
        super().__init__(layout, eps, decay, variant, batch_mode)
        self.D = np.ones(layout.dim)

    def _absorb(self, batch: FisherBatch):
        self.D = batch.decay * self.D + batch.square()

    def apply(self, g):
        return dop_apply(self.D, g, self.eps)

    def noise(self, rng):
        return dop_noise(self.D, self.eps, rng)


class FullFisher(_FisherBased):
    kind = "fisher"

    def __init__(self, layout, eps=1e-4, decay=inv_sqrt_decay, variant="op", batch_mode="mean_outer"):
        super().__init__(layout, eps, decay, variant, batch_mode)
        self.J = np.eye(layout.dim)
        self._chol = None
        self._root = None

    def _absorb(self, batch: FisherBatch):
        J = batch.decay * self.J + batch.outer()
        self.J = 0.5 * (J + J.T)
        self._chol = self._root = None

    def set_matrix(self, J: np.ndarray) -> None:
        self.J = np.array(J, dtype=np.float64)
        self._chol = self._root = None

    def apply(self, g):
        if self._chol is None:
            try:
                self._chol = scipy.linalg.cho_factor(_regularized(self.J, self.eps), lower=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise PreconditionerError(_fisher_diagnostics(self.J, self.eps)) from exc
        return scipy.linalg.cho_solve(self._chol, g)

    def noise(self, rng):
        if self._root is None:
            self._root = _inv_sqrt(_regularized(self.J, self.eps), self.J, self.eps)
        return self._root @ rng.standard_normal(self.dim)


class QuasiDiagonalOP(_FisherBased):
    kind = "qdop"

    def __init__(self, layout, eps=1e-4, decay=inv_sqrt_decay, variant="op", batch_mode="mean_outer", backend=None):
        super().__init__(layout, eps, decay, variant, batch_mode)
        self.state = QDState.identity(layout, self.eps)
        self.backend = kernels.get_backend(backend)

    def _absorb(self, batch: FisherBatch):
        s = self.state
        s.diag *= batch.decay
        s.diag += batch.square()
        s.row0 *= batch.decay
        s.row0 += batch.first_row(self.layout)
        starts = self.layout.offsets_array
        s.row0[starts] = s.diag[starts]
        s.factor = None

    def apply(self, g):
        return qd_apply(self.state, g, self.backend)

    def noise(self, rng):
        return qd_noise(self.state, rng, self.backend)

    @property
    def n_clamped(self) -> int:
        return self.state.n_clamped


def make_preconditioner(
    kind: str,
    layout: BlockLayout,
    eps: float = 1e-4,
    decay: Callable[[int], float] = inv_sqrt_decay,
    variant: str = "op",
    batch_mode: str = "mean_outer",
    backend: str | None = None,
) -> Preconditioner:
    if kind == "identity":
        return Identity(layout, eps, decay)
    if kind == "rmsprop":
        return RMSProp(layout, eps, decay)
    if kind == "fisher":
        return FullFisher(layout, eps, decay, variant, batch_mode)
    if kind == "dop":
        return DiagonalOP(layout, eps, decay, variant, batch_mode)
    if kind == "qdop":
        return QuasiDiagonalOP(layout, eps, decay, variant, batch_mode, backend)
    raise ValueError(f"unknown preconditioner kind {kind!r}; expected one of {KINDS}")
