"""Pure numpy versions of the quasi-diagonal kernels.

Each routine walks the layout's runs of equal-size blocks and handles a run as
one ``(n_blocks, size)`` matrix, so the cost is a handful of vectorized passes
over the parameter vector. Signatures match the compiled module.
"""
import numpy as np


def _runs(layout):
    for off, nb, size in layout.segments:
        yield slice(off, off + nb * size), nb, size


def qd_factor(diag, row0, eps, floor, layout, adiag, arow):
    """Quasi-diagonal Cholesky factor of ``J + eps*I`` known by diagonal and first rows.

    Writes the diagonal of ``A`` to ``adiag`` and its first rows to ``arow``
    (``arow`` at a block's first index holds ``A00`` again). Radicands that
    are not positive are replaced by ``floor``; returns ``(n_clamped, bad_block)``
    where ``bad_block`` is -1 unless a block holds a non-finite entry.
    """
    n_clamped = 0
    block0 = 0
    for sl, nb, size in _runs(layout):
        d = diag[sl].reshape(nb, size)
        r = row0[sl].reshape(nb, size)
        rad0 = d[:, 0] + eps
        broken = ~np.isfinite(rad0) | ~np.isfinite(r[:, 1:]).all(axis=1) | ~np.isfinite(d).all(axis=1)
        if broken.any():
            return n_clamped, block0 + int(np.argmax(broken))
        bad0 = ~(rad0 > 0)
        n_clamped += int(np.count_nonzero(bad0))
        rad0 = np.where(bad0, floor, rad0)
        a00 = 1.0 / np.sqrt(rad0)
        cross = a00[:, None] * r[:, 1:]
        rad = d[:, 1:] - cross * cross + eps
        bad = ~(rad > 0)
        n_clamped += int(np.count_nonzero(bad))
        rad = np.where(bad, floor, rad)
        aii = 1.0 / np.sqrt(rad)
        ad = adiag[sl].reshape(nb, size)
        ar = arow[sl].reshape(nb, size)
        ad[:, 0] = a00
        ad[:, 1:] = aii
        ar[:, 0] = a00
        ar[:, 1:] = -(a00 * a00)[:, None] * aii * r[:, 1:]
        finite = np.isfinite(ad).all(axis=1) & np.isfinite(ar).all(axis=1)
        if not finite.all():
            return n_clamped, block0 + int(np.argmin(finite))
        block0 += nb
    return n_clamped, -1


def qd_apply(adiag, arow, g, layout, out):
    """``out = A A^T g`` blockwise."""
    for sl, nb, size in _runs(layout):
        a0 = adiag[sl].reshape(nb, size)[:, 0]
        d = adiag[sl].reshape(nb, size)[:, 1:]
        c = arow[sl].reshape(nb, size)[:, 1:]
        gb = g[sl].reshape(nb, size)
        h0 = a0 * gb[:, 0]
        h = c * gb[:, 0:1] + d * gb[:, 1:]
        ob = out[sl].reshape(nb, size)
        ob[:, 0] = a0 * h0 + np.einsum("ij,ij->i", c, h)
        ob[:, 1:] = d * h
    return out


def qd_lower(adiag, arow, z, layout, out):
    """``out = A z`` blockwise (A is upper triangular: diagonal plus first row)."""
    for sl, nb, size in _runs(layout):
        a0 = adiag[sl].reshape(nb, size)[:, 0]
        d = adiag[sl].reshape(nb, size)[:, 1:]
        c = arow[sl].reshape(nb, size)[:, 1:]
        zb = z[sl].reshape(nb, size)
        ob = out[sl].reshape(nb, size)
        ob[:, 0] = a0 * zb[:, 0] + np.einsum("ij,ij->i", c, zb[:, 1:])
        ob[:, 1:] = d * zb[:, 1:]
    return out


def qd_rank_one(diag, row0, u, gamma, layout):
    """In-place moving-average update with the block restrictions of ``u u^T``."""
    keep = 1.0 - gamma
    diag *= keep
    diag += gamma * u * u
    for sl, nb, size in _runs(layout):
        r = row0[sl].reshape(nb, size)
        ub = u[sl].reshape(nb, size)
        r *= keep
        r += (gamma * ub[:, 0:1]) * ub
        r[:, 0] = diag[sl].reshape(nb, size)[:, 0]
