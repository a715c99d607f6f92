"""Micro-structured block partitions of weight tensors.

Block shape conventions:

* 1 dim ``[b]``: ``b`` coefficients along the GEMM reduction axis.
* 2 dims ``[r, o]``: ``r`` along the reduction axis, ``o`` along the output
  axis of the GEMM view.  ``[4, 1]`` is therefore a run of 4 inputs feeding
  one output neuron.
* 3 dims ``[o, i, k]``: out-channel x in-channel x flattened-kernel tiles of
  a conv tensor viewed as (Cout, Cin, Kh*Kw).

Extents that do not divide the layer produce smaller ("ragged") edge blocks.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, as_gemm_view


@dataclass(frozen=True)
class BlockShape:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not 1 <= len(dims) <= 3:
            raise ValueError(f"block shape needs 1-3 extents, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ValueError(f"block extents must be positive: {dims}")
        if max(dims) < 2:
            raise ValueError("at least one block extent must exceed 1")

    @classmethod
    def parse(cls, text: str) -> BlockShape:
        """Parse ``"2x2"``, ``"8,1"``, ``"[2, 2, 2]"`` and the like."""
        parts = [p for p in re.split(r"[x×,\s\[\]]+", text.strip()) if p]
        if not parts or not all(p.isdigit() for p in parts):
            raise ValueError(f"cannot parse block shape {text!r}")
        return cls(tuple(int(p) for p in parts))

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def axis_roles(self) -> tuple[str, ...]:
        return {1: ("reduction",), 2: ("reduction", "output"),
                3: ("out_channel", "in_channel", "kernel")}[self.rank]

    @property
    def shared_extent(self) -> int:
        """Number of coefficients that share one multiply in a unified block."""
        return self.dims[1] if self.rank == 3 else self.dims[0]

    @property
    def output_extent(self) -> int:
        return 1 if self.rank == 1 else (self.dims[1] if self.rank == 2 else self.dims[0])

    def __str__(self) -> str:
        return "x".join(str(d) for d in self.dims)


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Exhaustive, disjoint tiling of a layer into blocks.

    `indices` lists flat (row-major) coefficient indices block after block;
    block j occupies ``indices[offsets[j]:offsets[j + 1]]``.  Within a block
    coefficients follow row-major order of the tiled view, and blocks follow
    row-major order of the block grid.
    """

    layer_shape: tuple[int, ...]
    block_shape: BlockShape
    view_shape: tuple[int, ...]
    grid: tuple[int, ...]
    indices: np.ndarray
    offsets: np.ndarray
    extents: np.ndarray

    @property
    def num_blocks(self) -> int:
        return len(self.offsets) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def num_coefficients(self) -> int:
        return int(self.offsets[-1])

    @property
    def edge_policy(self) -> str:
        return "ragged"

    @property
    def ragged(self) -> np.ndarray:
        """Indices of blocks smaller than the nominal block shape."""
        return np.flatnonzero(self.sizes < self.block_shape.size)

    @property
    def block_ids(self) -> np.ndarray:
        """Block id of each entry of `indices`."""
        return np.repeat(np.arange(self.num_blocks), self.sizes)

    def block(self, j: int) -> np.ndarray:
        if not 0 <= j < self.num_blocks:
            raise IndexError(f"block {j} out of range [0, {self.num_blocks})")
        return self.indices[self.offsets[j] : self.offsets[j + 1]]


def _view_shape(layer_shape: tuple[int, ...], bs: BlockShape) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Tiled view of the layer and the block extents along each view axis."""
    if bs.rank == 3:
        if len(layer_shape) != 4:
            raise ShapeError(f"3-dim block {bs} needs a rank-4 conv layer, got rank {len(layer_shape)}")
        co, ci, kh, kw = layer_shape
        return (co, ci, kh * kw), bs.dims
    view = as_gemm_view(layer_shape)
    red, out = (bs.dims[0], 1) if bs.rank == 1 else bs.dims
    return (view.rows, view.cols), (out, red)


@lru_cache(maxsize=256)
def _build(layer_shape: tuple[int, ...], dims: tuple[int, ...]) -> BlockPartition:
    bs = BlockShape(dims)
    view, ext = _view_shape(layer_shape, bs)
    grid = tuple(-(-v // e) for v, e in zip(view, ext))
    coords = np.indices(view).reshape(len(view), -1)
    bid = np.zeros(coords.shape[1], dtype=np.int64)
    for axis in range(len(view)):
        bid = bid * grid[axis] + coords[axis] // ext[axis]
    indices = np.argsort(bid, kind="stable")
    counts = np.bincount(bid, minlength=int(np.prod(grid)))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    # actual extents of every block along each view axis
    gidx = np.indices(grid).reshape(len(grid), -1)
    extents = np.stack([np.minimum(ext[a], view[a] - gidx[a] * ext[a]) for a in range(len(view))], axis=1)
    for arr in (indices, offsets, extents):
        arr.setflags(write=False)
    return BlockPartition(layer_shape, bs, view, grid, indices, offsets, extents)


def partition(layer_shape, block_shape: BlockShape | str | tuple) -> BlockPartition:
    if not isinstance(block_shape, BlockShape):
        block_shape = BlockShape.parse(block_shape) if isinstance(block_shape, str) else BlockShape(tuple(block_shape))
    shape = tuple(int(s) for s in layer_shape)
    if len(shape) not in (2, 4):
        raise ShapeError(f"unsupported rank {len(shape)}")
    return _build(shape, block_shape.dims)


def block_values(t: np.ndarray, p: BlockPartition, j: int) -> np.ndarray:
    return np.asarray(t).ravel()[p.block(j)].copy()


def scatter_block(t: np.ndarray, p: BlockPartition, j: int, values) -> np.ndarray:
    """Return a copy of `t` with block j replaced by `values`."""
    idx = p.block(j)
    values = np.asarray(values)
    if values.size != idx.size:
        raise ValueError(f"block {j} holds {idx.size} coefficients, got {values.size} values")
    out = np.array(t, copy=True, order="C")
    out.ravel()[idx] = values.ravel()
    return out
