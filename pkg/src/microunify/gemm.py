"""Micro-structured GEMM with exact operation counts.

A weight matrix is compiled into blocks tagged raw, unified, pruned or
sparse (N:M).  `gemm_micro` executes W @ X block by block:

* pruned blocks are skipped;
* a unified block forms, for each sharing group and output column, the
  signed sum of the group's inputs with additions only and then applies
  the block magnitude with a single multiply.  A group is one output row of
  a 1-/2-dim block, or one (out-channel, kernel position) pair of a 3-dim
  block, whose in-channel run shares the multiply;
* sparse blocks multiply only their kept coefficients;
* raw blocks multiply every coefficient.

Additions are counted one per accumulation, so a k-term dot product costs k
multiplies and k adds in every path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .blocking import BlockPartition, partition
from .projection import ConstraintSpec, LayerReport, num_selected, project
from .tensor import as_gemm_view, im2col_batch

RAW, UNIFIED, PRUNED, SPARSE = "raw", "unified", "pruned", "sparse"


@dataclass
class OpCount:
    multiplies: int = 0
    adds: int = 0

    def __add__(self, other: OpCount) -> OpCount:
        return OpCount(self.multiplies + other.multiplies, self.adds + other.adds)

    def __mul__(self, n: int) -> OpCount:
        return OpCount(self.multiplies * n, self.adds * n)


@dataclass(eq=False)
class UnifiedMatrix:
    rows: int
    cols: int
    partition: BlockPartition
    tags: list[str]
    magnitudes: dict[int, np.float32] = field(default_factory=dict)
    signs: dict[int, np.ndarray] = field(default_factory=dict)
    raw: dict[int, np.ndarray] = field(default_factory=dict)
    keep: dict[int, np.ndarray] = field(default_factory=dict)

    def block_coords(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """GEMM (row, col) of block j's coefficients, in block order."""
        return np.divmod(self.partition.block(j), self.cols)

    def groups(self, j: int) -> np.ndarray:
        """Sharing groups of block j as an (n_groups, group_size) index array."""
        ext = self.partition.extents[j]
        if self.partition.block_shape.rank == 3:
            co, ci, kk = ext
            return np.arange(co * ci * kk).reshape(co, ci, kk).transpose(0, 2, 1).reshape(co * kk, ci)
        rows, red = ext
        return np.arange(rows * red).reshape(rows, red)

    def expand(self) -> np.ndarray:
        """Dense float32 reconstruction."""
        out = np.zeros(self.rows * self.cols, np.float32)
        for j, tag in enumerate(self.tags):
            idx = self.partition.block(j)
            if tag == UNIFIED:
                q = self.magnitudes[j]
                out[idx] = np.where(self.signs[j], -q, q)
            elif tag == RAW:
                out[idx] = self.raw[j]
            elif tag == SPARSE:
                out[idx[self.keep[j]]] = self.raw[j]
        return out.reshape(self.rows, self.cols)


def compile_matrix(weights, p: BlockPartition, report: LayerReport | None) -> UnifiedMatrix:
    """Tag every block of `weights` according to `report` (None means dense)."""
    w = np.asarray(weights, np.float32)
    if tuple(w.shape) != p.layer_shape:
        raise ValueError(f"weights {w.shape} do not match partition {p.layer_shape}")
    view = as_gemm_view(w.shape)
    flat = w.ravel()
    um = UnifiedMatrix(view.rows, view.cols, p, [RAW] * p.num_blocks)
    constrained = set() if report is None or report.method == "none" else {int(j) for j in report.blocks}
    if report is not None and report.method == "unify":
        if len(report.magnitudes) != len(report.blocks):
            raise ValueError("report has one magnitude per unified block")
        cursor = 0
        for j, q in zip(report.blocks, report.magnitudes):
            j = int(j)
            vals = flat[p.block(j)]
            signs = report.signs[cursor : cursor + len(vals)]
            cursor += len(vals)
            recon = np.where(signs, -q, q).astype(np.float32)
            if recon.tobytes() != vals.tobytes():
                raise ValueError(f"report/weights mismatch in unified block {j}")
            um.tags[j] = UNIFIED
            um.magnitudes[j] = np.float32(q)
            um.signs[j] = np.asarray(signs, bool)
    elif report is not None and report.method == "prune":
        for j in constrained:
            if np.any(flat[p.block(j)].view(np.uint32) != 0):
                raise ValueError(f"report/weights mismatch: pruned block {j} is not zero")
            um.tags[j] = PRUNED
    elif report is not None and report.method == "nm_prune":
        for j in constrained:
            lo, hi = p.offsets[j], p.offsets[j + 1]
            keep = np.asarray(report.keep[lo:hi], bool)
            vals = flat[p.block(j)]
            if np.any(vals[~keep].view(np.uint32) != 0):
                raise ValueError(f"report/weights mismatch: block {j} has values outside its mask")
            um.tags[j] = SPARSE
            um.keep[j] = keep
            um.raw[j] = vals[keep].copy()
    for j in range(p.num_blocks):
        if um.tags[j] == RAW:
            um.raw[j] = flat[p.block(j)].copy()
    return um


def gemm_naive(A, B) -> tuple[np.ndarray, OpCount]:
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"cannot multiply {A.shape} by {B.shape}")
    m, k = A.shape
    n = B.shape[1]
    C = (A.astype(np.float64) @ B.astype(np.float64)).astype(np.float32)
    return C, OpCount(m * k * n, m * k * n)


def gemm_micro(W: UnifiedMatrix, X) -> tuple[np.ndarray, OpCount]:
    """Execute W @ X block by block (block-index order), counting every op."""
    X = np.asarray(X, np.float64)
    if X.ndim != 2 or X.shape[0] != W.cols:
        raise ValueError(f"cannot multiply {W.rows}x{W.cols} by {X.shape}")
    n = X.shape[1]
    C = np.zeros((W.rows, n))
    ops = OpCount()
    for j, tag in enumerate(W.tags):
        if tag == PRUNED:
            continue
        rows, cols = W.block_coords(j)
        if tag == UNIFIED:
            q = float(W.magnitudes[j])
            sg = W.signs[j]
            for grp in W.groups(j):
                xs = X[cols[grp]]
                neg = sg[grp]
                s = xs[~neg].sum(axis=0) - xs[neg].sum(axis=0)
                C[rows[grp[0]]] += q * s
                ops.multiplies += n
                ops.adds += len(grp) * n
            continue
        if tag == SPARSE:
            keep = W.keep[j]
            rows, cols = rows[keep], cols[keep]
        vals = W.raw[j].astype(np.float64)
        np.add.at(C, rows, vals[:, None] * X[cols])
        ops.multiplies += len(vals) * n
        ops.adds += len(vals) * n
    return C.astype(np.float32), ops


def _block_cost(p: BlockPartition, j: int, tag: str, kept: int = 0) -> OpCount:
    ext = p.extents[j]
    size = int(np.prod(ext))
    if tag == PRUNED:
        return OpCount()
    if tag == UNIFIED:
        # one multiply per output row (per kernel position for 3-dim blocks)
        groups = int(ext[0] * ext[2]) if p.block_shape.rank == 3 else int(ext[0])
        return OpCount(groups, size)
    if tag == SPARSE:
        return OpCount(kept, kept)
    return OpCount(size, size)


def count_multiplies(p: BlockPartition, report: LayerReport | None, n_cols: int) -> OpCount:
    """Analytic op count of `gemm_micro` for a layer with this report."""
    method = "none" if report is None else report.method
    constrained = set() if method == "none" else {int(j) for j in report.blocks}
    total = OpCount()
    for j in range(p.num_blocks):
        if j not in constrained:
            total = total + _block_cost(p, j, RAW)
        elif method == "unify":
            total = total + _block_cost(p, j, UNIFIED)
        elif method == "prune":
            total = total + _block_cost(p, j, PRUNED)
        else:
            lo, hi = p.offsets[j], p.offsets[j + 1]
            total = total + _block_cost(p, j, SPARSE, int(np.count_nonzero(report.keep[lo:hi])))
    return total * n_cols


def multiplier_reduction(constraint) -> float:
    """Multiply reduction factor of one fully constrained block."""
    bs = constraint.block_shape
    if constraint.method == "unify":
        return float(bs.shared_extent)
    if constraint.method == "prune":
        return float("inf")
    if constraint.method == "nm_prune":
        return bs.size / constraint.nm_keep if constraint.nm_keep else float("inf")
    return 1.0


@dataclass
class MacsEstimate:
    dense: dict[int, int]
    constrained: dict[int, float]

    @property
    def dense_total(self) -> int:
        return sum(self.dense.values())

    @property
    def total(self) -> float:
        return float(sum(self.constrained.values()))

    def gmacs(self) -> float:
        return self.total / 1e9


def macs_estimate(model, spec: ConstraintSpec | None = None) -> MacsEstimate:
    """Per-sample MACs of every fc/conv layer, dense and under `spec`.

    Dense MACs are output positions x reduction length x output channels; a
    constrained layer scales by (1 - r) + r / factor for constrained ratio r.
    """
    spec = spec or ConstraintSpec()
    dense, constrained = {}, {}
    for i, layer in model.trainable_layers().items():
        out_shape = model.shapes[i + 1]
        positions = int(np.prod(out_shape[1:])) if len(out_shape) == 3 else 1
        view = as_gemm_view(layer.w.shape)
        dense[i] = positions * view.cols * view.rows
        c = spec.get(i)
        r = 1.0 if c.method == "nm_prune" else c.ratio
        if c.active:
            p = partition(layer.w.shape, c.block_shape)
            r = 1.0 if c.method == "nm_prune" else num_selected(c.ratio, p.num_blocks) / p.num_blocks
        f = multiplier_reduction(c)
        constrained[i] = dense[i] * ((1 - r) + r / f) if c.active else float(dense[i])
    return MacsEstimate(dense, constrained)


# --- running whole models through the micro kernel --------------------------

def compile_model(model, report) -> dict[int, UnifiedMatrix]:
    out = {}
    for i, layer in model.trainable_layers().items():
        lr = report.layers.get(i) if report is not None else None
        if lr is None or lr.method == "none":
            # dense layers run as single-coefficient raw blocks with no sharing
            um = _dense_matrix(layer.w)
        else:
            um = compile_matrix(layer.w, partition(layer.w.shape, lr.block_shape), lr)
        out[i] = um
    return out


def _dense_matrix(w) -> UnifiedMatrix:
    view = as_gemm_view(w.shape)
    p = _row_partition(tuple(w.shape))
    return UnifiedMatrix(view.rows, view.cols, p, [RAW] * p.num_blocks,
                         raw={j: np.asarray(w, np.float32).ravel()[p.block(j)].copy() for j in range(p.num_blocks)})


def _row_partition(shape) -> BlockPartition:
    """One block per GEMM row: the cheapest exact tiling for dense layers."""
    view = as_gemm_view(shape)
    return partition(shape, (max(view.cols, 2), 1))


def micro_forward(model, compiled: dict[int, UnifiedMatrix], x) -> tuple[np.ndarray, OpCount]:
    """Inference with fc/conv layers executed by `gemm_micro`."""
    x = np.asarray(x, np.float64)
    ops = OpCount()
    for i, layer in enumerate(model.layers):
        if layer.kind == "fc":
            y, c = gemm_micro(compiled[i], x.T)
            x = y.astype(np.float64).T + layer.b
        elif layer.kind == "conv":
            n = len(x)
            cols = im2col_batch(x, (layer.kh, layer.kw), layer.stride, layer.pad)
            npos = cols.shape[2]
            flat = cols.transpose(1, 0, 2).reshape(cols.shape[1], n * npos)
            y, c = gemm_micro(compiled[i], flat)
            ho, wo = model.shapes[i + 1][1:]
            x = y.astype(np.float64).reshape(layer.cout, n, ho, wo).transpose(1, 0, 2, 3) + layer.b[None, :, None, None]
        else:
            x, c = layer.forward(x)[0], OpCount()
        x = x.astype(model.dtype).astype(np.float64)
        ops = ops + c
    return x.astype(model.dtype), ops


def predicted_model_ops(model, report, n_samples: int) -> OpCount:
    total = OpCount()
    for i, layer in model.trainable_layers().items():
        out_shape = model.shapes[i + 1]
        positions = int(np.prod(out_shape[1:])) if len(out_shape) == 3 else 1
        lr = report.layers.get(i) if report is not None else None
        if lr is None or lr.method == "none":
            total = total + count_multiplies(_row_partition(tuple(layer.w.shape)), None, n_samples * positions)
        else:
            total = total + count_multiplies(partition(layer.w.shape, lr.block_shape), lr, n_samples * positions)
    return total


def bench_case(weights, constraint, n_cols: int, rng) -> dict:
    """Run one benchmark point; returns counts and wall time."""
    w, rep = project(weights, constraint)
    p = partition(w.shape, constraint.block_shape)
    um = compile_matrix(w, p, rep)
    X = rng.standard_normal((um.cols, n_cols)).astype(np.float32)
    t0 = time.perf_counter()
    _, ops = gemm_micro(um, X)
    wall = time.perf_counter() - t0
    naive = um.rows * um.cols * n_cols
    return {"naive_mults": naive, "micro_mults": ops.multiplies,
            "reduction": naive / ops.multiplies if ops.multiplies else float("inf"), "wall_time": wall}
