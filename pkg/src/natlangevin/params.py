"""Block-structured flat parameter vectors.

Every neuron owns one contiguous block of the flat vector: its bias at local
index 0 followed by its incoming weights. Gradients, preconditioner states and
injected noise all live in this coordinate system.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"LBNN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class LayoutMismatch(ValueError):
    """Two parameter vectors with different block layouts were combined."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BlockLayout:
    offsets: tuple[int, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.offsets) != len(self.sizes):
            raise ValueError("offsets and sizes differ in length")
        expected = 0
        for b, (off, size) in enumerate(zip(self.offsets, self.sizes)):
            if size < 1:
                raise ValueError(f"block {b} has size {size} < 1")
            if off != expected:
                raise ValueError(f"block {b} starts at {off}, expected {expected}")
            expected += size

    @classmethod
    def from_sizes(cls, sizes: Iterable[int]) -> "BlockLayout":
        sizes = tuple(int(s) for s in sizes)
        offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(sizes)[:-1]])) if sizes else ()
        return cls(offsets, sizes)

    @classmethod
    def dense_layers(cls, layer_sizes: Sequence[int]) -> "BlockLayout":
        """Layout of a fully connected net: one block of size fan_in + 1 per unit."""
        sizes = []
        for fan_in, units in zip(layer_sizes[:-1], layer_sizes[1:]):
            sizes.extend([fan_in + 1] * units)
        return cls.from_sizes(sizes)

    @property
    def dim(self) -> int:
        return self.offsets[-1] + self.sizes[-1] if self.sizes else 0

    @property
    def n_blocks(self) -> int:
        return len(self.sizes)

    @cached_property
    def segments(self) -> tuple[tuple[int, int, int], ...]:
        """Maximal runs of equal-size blocks as ``(offset, n_blocks, size)``."""
        runs: list[list[int]] = []
        for off, size in zip(self.offsets, self.sizes):
            if runs and runs[-1][2] == size:
                runs[-1][1] += 1
            else:
                runs.append([off, 1, size])
        return tuple(tuple(r) for r in runs)

    @cached_property
    def offsets_array(self) -> np.ndarray:
        return np.asarray(self.offsets, dtype=np.int64)

    @cached_property
    def sizes_array(self) -> np.ndarray:
        return np.asarray(self.sizes, dtype=np.int64)

    @cached_property
    def block_starts_mask(self) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        mask[self.offsets_array] = True
        return mask

    def block_slice(self, b: int) -> slice:
        if not 0 <= b < self.n_blocks:
            raise IndexError(f"block index {b} out of range for {self.n_blocks} blocks")
        off = self.offsets[b]
        return slice(off, off + self.sizes[b])


class ParamVector:
    """A flat float64 array tagged with its block layout."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: BlockLayout, copy: bool = False):
        values = np.array(values, dtype=np.float64, copy=copy) if copy else np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != layout.dim:
            raise ValueError(f"expected a vector of length {layout.dim}, got shape {values.shape}")
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: BlockLayout) -> "ParamVector":
        return cls(np.zeros(layout.dim), layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def block(self, b: int) -> np.ndarray:
        return block_view(self, b)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParamVector(dim={self.layout.dim}, blocks={self.layout.n_blocks})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None


def _check_same_layout(x: ParamVector, y: ParamVector) -> None:
    if x.layout != y.layout:
        raise LayoutMismatch(
            f"layouts differ: {x.layout.n_blocks} blocks/dim {x.layout.dim} vs "
            f"{y.layout.n_blocks} blocks/dim {y.layout.dim}"
        )


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a * x + y`` as a new vector; neither input is modified."""
    _check_same_layout(x, y)
    out = y.values.copy()
    if a != 0.0:
        out += a * x.values
    return ParamVector(out, y.layout)


def block_view(v: ParamVector, b: int) -> np.ndarray:
    """Writable view on the entries of block ``b``."""
    return v.values[v.layout.block_slice(b)]


def _write_header(fh, layout: BlockLayout, magic: bytes = MAGIC) -> None:
    fh.write(_HEADER.pack(magic, FORMAT_VERSION, layout.dim, layout.n_blocks))
    pairs = np.empty((layout.n_blocks, 2), dtype="<u8")
    pairs[:, 0] = layout.offsets
    pairs[:, 1] = layout.sizes
    fh.write(pairs.tobytes())


def _read_header(fh, magic: bytes = MAGIC) -> BlockLayout:
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise CheckpointError("truncated header")
    got_magic, version, dim, n_blocks = _HEADER.unpack(raw)
    if got_magic != magic:
        raise CheckpointError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    raw = fh.read(16 * n_blocks)
    if len(raw) != 16 * n_blocks:
        raise CheckpointError("truncated block table")
    pairs = np.frombuffer(raw, dtype="<u8").reshape(n_blocks, 2)
    layout = BlockLayout(tuple(int(o) for o in pairs[:, 0]), tuple(int(s) for s in pairs[:, 1]))
    if layout.dim != dim:
        raise CheckpointError(f"block table covers {layout.dim} entries, header says {dim}")
    return layout


def _read_doubles(fh, count: int) -> np.ndarray:
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise CheckpointError(f"expected {count} doubles, file holds {len(raw) // 8}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def save_checkpoint(path, v: ParamVector) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, v.layout)
        fh.write(np.ascontiguousarray(v.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamVector:
    with open(path, "rb") as fh:
        layout = _read_header(fh)
        values = _read_doubles(fh, layout.dim)
        if fh.read(1):
            raise CheckpointError("trailing bytes after parameter values")
    return ParamVector(values, layout)


def save_arrays(path, layout: BlockLayout, arrays: Sequence[np.ndarray], magic: bytes, scalars=()) -> None:
    """Write scalars and dim-length arrays after a layout header (used for preconditioner state)."""
    with open(path, "wb") as fh:
        _write_header(fh, layout, magic)
        fh.write(struct.pack("<QQ", len(scalars), len(arrays)))
        fh.write(np.asarray(scalars, dtype="<f8").tobytes())
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path, magic: bytes) -> tuple[BlockLayout, list[float], list[np.ndarray]]:
    with open(Path(path), "rb") as fh:
        layout = _read_header(fh, magic)
        raw = fh.read(16)
        if len(raw) != 16:
            raise CheckpointError("truncated array table")
        n_scalars, n_arrays = struct.unpack("<QQ", raw)
        scalars = [float(x) for x in _read_doubles(fh, n_scalars)]
        arrays = [_read_doubles(fh, layout.dim) for _ in range(n_arrays)]
        if fh.read(1):
            raise CheckpointError("trailing bytes after arrays")
    return layout, scalars, arrays
