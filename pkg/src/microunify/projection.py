"""Constraint sets and their Euclidean projections.

A layer constraint says which fraction of a layer's blocks must be

* unified: every coefficient in the block has the same magnitude q, signs
  are kept (a coefficient >= 0 becomes +q, otherwise -q), with q the mean
  absolute value of the block;
* pruned: every coefficient in the block is zero;
* N:M pruned (``nm_prune``): within every block only the `nm_keep` largest
  magnitudes survive.

Blocks are chosen by the smallest selection score, ties going to the lower
block index.  For unification the default score is the squared distance to
the unified block, which makes the projection the nearest feasible point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocking import BlockPartition, BlockShape, partition

METHODS = ("none", "unify", "prune", "nm_prune")
SELECTIONS = ("distortion", "l1_norm", "l2_norm")
_DEFAULT_SELECTION = {"unify": "distortion", "prune": "l1_norm"}


class ConstraintError(ValueError):
    """A constraint cannot be applied to the layer it targets."""


@dataclass(frozen=True)
class LayerConstraint:
    method: str = "none"
    block_shape: BlockShape | None = None
    ratio: float = 1.0
    selection: str | None = None
    nm_keep: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConstraintError(f"unknown method {self.method!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConstraintError(f"ratio {self.ratio} outside [0, 1]")
        if self.method == "none":
            return
        if self.block_shape is None:
            raise ConstraintError(f"method {self.method} needs a block shape")
        if self.selection is None and self.method in _DEFAULT_SELECTION:
            object.__setattr__(self, "selection", _DEFAULT_SELECTION[self.method])
        if self.selection is not None and self.selection not in SELECTIONS:
            raise ConstraintError(f"unknown selection {self.selection!r}")
        if self.method == "nm_prune":
            bs = self.block_shape
            if self.nm_keep is None or self.nm_keep < 0:
                raise ConstraintError("nm_prune needs nm_keep >= 0")
            if self.nm_keep >= bs.size:
                raise ConstraintError(f"nm_keep {self.nm_keep} must be below block size {bs.size}")
            if bs.rank == 3 or bs.output_extent != 1:
                raise ConstraintError(f"nm_prune needs 1-dim blocks along the reduction axis, got {bs}")

    @property
    def active(self) -> bool:
        return self.method != "none"

    def check_layer(self, shape) -> None:
        if self.active:
            try:
                partition(shape, self.block_shape)
            except ValueError as exc:
                raise ConstraintError(str(exc)) from exc


NONE = LayerConstraint()


@dataclass
class ConstraintSpec:
    """Per-layer constraints keyed by layer id; absent layers are unconstrained."""

    layers: dict[int, LayerConstraint] = field(default_factory=dict)

    def get(self, layer: int) -> LayerConstraint:
        return self.layers.get(layer, NONE)

    def active_layers(self) -> list[int]:
        return sorted(i for i, c in self.layers.items() if c.active)

    def validate(self, layer_shapes: dict[int, tuple[int, ...]]) -> None:
        for i, c in self.layers.items():
            if i not in layer_shapes:
                if c.active:
                    raise ConstraintError(f"layer {i} is not a trainable layer")
                continue
            c.check_layer(layer_shapes[i])


@dataclass
class Violation:
    layer: int
    block: int | None
    reason: str


@dataclass
class LayerReport:
    """Constrained blocks of one layer.

    `signs` (unify) holds np.signbit of every coefficient of the unified
    blocks, concatenated in block order; `keep` (nm_prune) marks the
    surviving coefficients of every block the same way.
    """

    layer: int
    method: str
    block_shape: BlockShape | None
    blocks: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    magnitudes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))
    signs: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    keep: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    ragged: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    num_blocks: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class ConstraintReport:
    layers: dict[int, LayerReport] = field(default_factory=dict)

    @property
    def violations(self) -> list[Violation]:
        return [v for r in self.layers.values() for v in r.violations]

    @property
    def ok(self) -> bool:
        return not self.violations


# --- single blocks ---------------------------------------------------------

def unify_block(values) -> tuple[np.float32, np.ndarray]:
    v = np.asarray(values, dtype=np.float32).ravel()
    if v.size == 0:
        raise ValueError("cannot unify an empty block")
    q = np.float32(np.mean(np.abs(v.astype(np.float64))))
    return q, np.where(v >= 0, q, -q).astype(np.float32)


def unify_distortion(values) -> float:
    a = np.abs(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("empty block")
    return float(np.sum((a - a.mean()) ** 2))


def num_selected(ratio: float, num_blocks: int) -> int:
    # the epsilon absorbs binary rounding, e.g. 0.07 * 100 = 7.000000000000001
    return min(num_blocks, max(0, math.ceil(ratio * num_blocks - 1e-9)))


# --- whole layers ----------------------------------------------------------

def _gather(t: np.ndarray, p: BlockPartition) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t)
    if tuple(t.shape) != p.layer_shape:
        raise ValueError(f"tensor shape {t.shape} does not match partition {p.layer_shape}")
    vals = t.ravel()[p.indices]
    return vals, np.abs(vals.astype(np.float64))


def _block_scores(absv: np.ndarray, p: BlockPartition, selection: str) -> tuple[np.ndarray, np.ndarray]:
    starts = p.offsets[:-1]
    sizes = p.sizes
    mean = np.add.reduceat(absv, starts) / sizes
    if selection == "distortion":
        score = np.add.reduceat((absv - np.repeat(mean, sizes)) ** 2, starts)
    elif selection == "l1_norm":
        score = np.add.reduceat(absv, starts)
    elif selection == "l2_norm":
        score = np.add.reduceat(absv * absv, starts)
    else:
        raise ConstraintError(f"unknown selection {selection!r}")
    return score, mean


def _select(score: np.ndarray, ratio: float) -> np.ndarray:
    k = num_selected(ratio, len(score))
    return np.sort(np.argsort(score, kind="stable")[:k])


def _write(t: np.ndarray, p: BlockPartition, vals: np.ndarray) -> np.ndarray:
    out = np.empty(t.size, dtype=np.asarray(t).dtype)
    out[p.indices] = vals
    return out.reshape(t.shape)


def project_unify(t, p: BlockPartition, ratio: float, selection: str = "distortion",
                  layer: int = 0) -> tuple[np.ndarray, LayerReport]:
    t = np.asarray(t, dtype=np.float32)
    vals, absv = _gather(t, p)
    score, mean = _block_scores(absv, p, selection)
    chosen = _select(score, ratio)
    picked = np.zeros(p.num_blocks, bool)
    picked[chosen] = True
    coef = np.repeat(picked, p.sizes)
    q = mean.astype(np.float32)
    qc = np.repeat(q, p.sizes)[coef]
    new = vals.copy()
    new[coef] = np.where(vals[coef] >= 0, qc, -qc)
    rep = LayerReport(layer, "unify", p.block_shape, blocks=chosen, magnitudes=q[chosen],
                      signs=np.signbit(new[coef]), ragged=p.ragged, num_blocks=p.num_blocks)
    return _write(t, p, new), rep


def project_prune(t, p: BlockPartition, ratio: float, selection: str = "l1_norm",
                  layer: int = 0) -> tuple[np.ndarray, LayerReport]:
    if selection == "distortion":
        selection = "l2_norm"  # distance to the zero block
    t = np.asarray(t, dtype=np.float32)
    vals, absv = _gather(t, p)
    score, _ = _block_scores(absv, p, selection)
    chosen = _select(score, ratio)
    picked = np.zeros(p.num_blocks, bool)
    picked[chosen] = True
    new = vals.copy()
    new[np.repeat(picked, p.sizes)] = 0.0
    rep = LayerReport(layer, "prune", p.block_shape, blocks=chosen, ragged=p.ragged,
                      num_blocks=p.num_blocks)
    return _write(t, p, new), rep


def project_nm(t, p: BlockPartition, nm_keep: int, layer: int = 0) -> tuple[np.ndarray, LayerReport]:
    bs = p.block_shape
    if bs.rank == 3 or bs.output_extent != 1:
        raise ConstraintError(f"nm_prune needs 1-dim blocks along the reduction axis, got {bs}")
    if not 0 <= nm_keep < bs.size:
        raise ConstraintError(f"nm_keep {nm_keep} must be in [0, {bs.size})")
    t = np.asarray(t, dtype=np.float32)
    vals, absv = _gather(t, p)
    bid = p.block_ids
    pos = np.arange(vals.size) - p.offsets[bid]
    order = np.lexsort((pos, -absv, bid))
    rank = np.empty(vals.size, np.int64)
    rank[order] = np.arange(vals.size) - p.offsets[bid[order]]
    keep = rank < nm_keep
    new = np.where(keep, vals, np.float32(0.0)).astype(np.float32)
    rep = LayerReport(layer, "nm_prune", bs, blocks=np.arange(p.num_blocks), keep=keep,
                      ragged=p.ragged, num_blocks=p.num_blocks)
    return _write(t, p, new), rep


def project(t, constraint: LayerConstraint, layer: int = 0) -> tuple[np.ndarray, LayerReport]:
    """Project a layer tensor onto its constraint set."""
    t = np.asarray(t, dtype=np.float32)
    c = constraint
    if not c.active:
        return t.copy(), LayerReport(layer, "none", None)
    p = partition(t.shape, c.block_shape)
    if c.method == "unify":
        return project_unify(t, p, c.ratio, c.selection, layer)
    if c.method == "prune":
        return project_prune(t, p, c.ratio, c.selection, layer)
    return project_nm(t, p, c.nm_keep, layer)


# --- verification ----------------------------------------------------------

def _satisfied(t: np.ndarray, p: BlockPartition, c: LayerConstraint) -> np.ndarray:
    vals = np.asarray(t, dtype=np.float32).ravel()[p.indices]
    bits = vals.view(np.uint32)
    starts = p.offsets[:-1]
    if c.method == "unify":
        mag = bits & np.uint32(0x7FFFFFFF)
        return np.minimum.reduceat(mag, starts) == np.maximum.reduceat(mag, starts)
    if c.method == "prune":
        return np.add.reduceat((bits != 0).astype(np.int64), starts) == 0
    return np.add.reduceat((vals != 0).astype(np.int64), starts) <= c.nm_keep


def verify_layer(t, c: LayerConstraint, layer: int = 0,
                 expected: LayerReport | None = None) -> LayerReport:
    """Check a layer against its constraint exactly.

    Unified blocks must have bit-identical magnitudes, pruned blocks must be
    all +0.0, and N:M blocks may hold at most `nm_keep` nonzeros.  With
    `expected`, exactly its blocks are checked; otherwise the layer passes
    when enough blocks satisfy the constraint, and the report lists every
    satisfying block.
    """
    t = np.asarray(t, dtype=np.float32)
    if not c.active:
        return LayerReport(layer, "none", None)
    p = partition(t.shape, c.block_shape)
    ok = _satisfied(t, p, c)
    required = p.num_blocks if c.method == "nm_prune" else num_selected(c.ratio, p.num_blocks)
    violations = []
    if expected is not None:
        blocks = np.asarray(expected.blocks, np.int64)
        violations = [Violation(layer, int(j), f"block {j} does not satisfy {c.method}")
                      for j in blocks[~ok[blocks]]]
        if len(blocks) < required:
            violations.append(Violation(layer, None, f"{len(blocks)} constrained blocks, need {required}"))
    else:
        blocks = np.flatnonzero(ok)
        if len(blocks) < required:
            violations = [Violation(layer, int(j), f"block {j} does not satisfy {c.method}")
                          for j in np.flatnonzero(~ok)]
    rep = LayerReport(layer, c.method, c.block_shape, blocks=blocks, ragged=p.ragged,
                      num_blocks=p.num_blocks, violations=violations)
    vals = t.ravel()[p.indices]
    picked = np.zeros(p.num_blocks, bool)
    picked[blocks] = True
    coef = np.repeat(picked, p.sizes)
    if c.method == "unify":
        first = p.offsets[blocks]
        rep.magnitudes = np.abs(vals[first]).astype(np.float32) if len(blocks) else np.zeros(0, np.float32)
        rep.signs = np.signbit(vals[coef])
    elif c.method == "nm_prune":
        rep.keep = vals.view(np.uint32) != 0
    return rep


def verify_constraint(weights: dict[int, np.ndarray], spec: ConstraintSpec,
                      expected: ConstraintReport | None = None) -> ConstraintReport:
    """Verify every constrained layer; violations are returned as data."""
    report = ConstraintReport()
    for i in spec.active_layers():
        exp = expected.layers.get(i) if expected is not None else None
        report.layers[i] = verify_layer(weights[i], spec.get(i), i, exp)
    return report
