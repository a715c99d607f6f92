import numpy as np
import pytest

from cases import random_case
from microunify.blocking import BlockShape, partition
from microunify.gemm import (compile_matrix, compile_model, count_multiplies, gemm_micro, gemm_naive,
                             macs_estimate, micro_forward, predicted_model_ops)
from microunify.nn import Model
from microunify.projection import ConstraintSpec, LayerConstraint, project
from microunify.tensor import as_gemm_view


def compiled(w, c):
    q, rep = project(w, c)
    if not c.active:
        return q, compile_matrix(q, partition(q.shape, (max(as_gemm_view(q.shape).cols, 2), 1)), None)
    return q, compile_matrix(q, partition(q.shape, c.block_shape), rep), rep


def test_unified_2x2_tile_uses_half_the_multiplies():
    # q = 2, signs [[+, -], [+, +]]
    W = np.array([[2.0, -2.0], [2.0, 2.0]], np.float32)
    c = LayerConstraint("unify", BlockShape.parse("2x2"), 1.0)
    q, rep = project(W, c)
    um = compile_matrix(q, partition(q.shape, "2x2"), rep)
    X = np.array([[2.0, 1.0], [3.0, -1.0]], np.float32)
    C, ops = gemm_micro(um, X)
    # row 0: 2 * (x0 - x1), row 1: 2 * (x0 + x1)
    np.testing.assert_array_equal(C, [[-2.0, 4.0], [10.0, 0.0]])
    assert ops.multiplies == 4
    C_ref, naive = gemm_naive(W, X)
    assert naive.multiplies == 8
    np.testing.assert_array_equal(C, C_ref)


@pytest.mark.parametrize("bs,factor", [("2x2", 2), ("4x1", 4), ("8x1", 8), ("16x1", 16)])
def test_full_unify_reduction(bs, factor):
    w = np.random.default_rng(0).standard_normal((16, 32)).astype(np.float32)
    q, rep = project(w, LayerConstraint("unify", BlockShape.parse(bs), 1.0))
    p = partition(w.shape, bs)
    assert count_multiplies(p, None, 5).multiplies == 16 * 32 * 5
    assert count_multiplies(p, rep, 5).multiplies * factor == 16 * 32 * 5


def test_8x1_on_8x8_needs_64_multiplies_for_8_columns():
    w = np.random.default_rng(1).standard_normal((8, 8)).astype(np.float32)
    c = LayerConstraint("unify", BlockShape.parse("8x1"), 1.0)
    q, rep = project(w, c)
    um = compile_matrix(q, partition(q.shape, "8x1"), rep)
    _, ops = gemm_micro(um, np.ones((8, 8)))
    assert ops.multiplies == 64 and gemm_naive(q, np.ones((8, 8)))[1].multiplies == 512


def test_pruned_blocks_cost_nothing():
    w = np.random.default_rng(2).standard_normal((4, 4)).astype(np.float32)
    q, rep = project(w, LayerConstraint("prune", BlockShape.parse("2x2"), 0.5))
    um = compile_matrix(q, partition(q.shape, "2x2"), rep)
    C, ops = gemm_micro(um, np.eye(4))
    assert ops.multiplies == 8 * 4
    np.testing.assert_allclose(C, q, atol=0)


def test_compile_rejects_mismatched_report():
    w = np.random.default_rng(3).standard_normal((4, 4)).astype(np.float32)
    q, rep = project(w, LayerConstraint("unify", BlockShape.parse("2x2"), 1.0))
    with pytest.raises(ValueError, match="mismatch"):
        compile_matrix(w, partition(w.shape, "2x2"), rep)


def test_random_cases_match_naive_and_prediction():
    rng = np.random.default_rng(11)
    for _ in range(200):
        w, c = random_case(rng)
        q, um, *rest = compiled(w, c)
        rep = rest[0] if rest else None
        X = rng.standard_normal((um.cols, int(rng.integers(1, 6)))).astype(np.float32)
        C, ops = gemm_micro(um, X)
        ref = as_gemm_view(q).matrix(q).astype(np.float64) @ X
        bound = np.abs(as_gemm_view(q).matrix(q)).astype(np.float64) @ np.abs(X)
        assert np.all(np.abs(C - ref) <= 1e-5 * bound + 1e-30)
        np.testing.assert_array_equal(um.expand(), as_gemm_view(q).matrix(q))
        assert ops.multiplies == count_multiplies(um.partition, rep, X.shape[1]).multiplies


def test_monotone_in_ratio():
    w = np.random.default_rng(4).standard_normal((32, 32)).astype(np.float32)
    counts = []
    for r in np.linspace(0, 1, 9):
        _, rep = project(w, LayerConstraint("unify", BlockShape.parse("4x1"), r))
        counts.append(count_multiplies(partition(w.shape, "4x1"), rep, 1).multiplies)
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_macs_estimate_small_convnet():
    m = Model.from_arch("conv(16,3,3,3,1,1) relu maxpool conv(32,16,3,3,1,1) relu maxpool flatten fc(10,2048)",
                        (3, 32, 32))
    dense = 32 * 32 * 16 * 27 + 16 * 16 * 32 * 144 + 10 * 2048
    est = macs_estimate(m)
    assert est.dense_total == dense == 1_642_496
    spec = ConstraintSpec({3: LayerConstraint("unify", BlockShape.parse("2x2"), 1.0)})
    est = macs_estimate(m, spec)
    assert est.total == dense - 16 * 16 * 32 * 144 / 2


def test_micro_forward_matches_model():
    rng = np.random.default_rng(5)
    m = Model.from_arch("conv(4,2,3,3,1,1) relu flatten fc(3,64)", (2, 4, 4), seed=0)
    spec = ConstraintSpec({0: LayerConstraint("unify", BlockShape.parse("2x2x2"), 1.0),
                           3: LayerConstraint("prune", BlockShape.parse("4x1"), 0.5)})
    from microunify.admm import finalize
    final, report = finalize(m, spec)
    x = rng.standard_normal((5, 2, 4, 4)).astype(np.float32)
    y, ops = micro_forward(final, compile_model(final, report), x)
    np.testing.assert_allclose(y, final.predict(x), rtol=1e-5, atol=1e-5)
    assert ops == predicted_model_ops(final, report, 5)
