import numpy as np
import pytest
from hypothesis import given, strategies as st

from microunify.tensor import ShapeError, as_gemm_view, as_tensor, frobenius_norm, im2col, im2col_batch


def naive_conv(x, w, stride, pad):
    """Direct six-loop convolution over one (C, H, W) input, float64."""
    c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for cc in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            s += w[o, cc, a, b] * xp[cc, i * stride + a, j * stride + b]
                out[o, i, j] = s
    return out


def test_fc_view_is_identity():
    v = as_gemm_view((4, 6))
    assert (v.rows, v.cols) == (4, 6)
    assert all(v.tensor_coord(r, c) == (r, c) for r in range(4) for c in range(6))


def test_conv_view_flattens_reduction():
    v = as_gemm_view((64, 32, 3, 3))
    assert (v.rows, v.cols) == (64, 288)
    assert v.tensor_coord(5, 9 + 4) == (5, 1, 1, 1)


def test_rank1_rejected():
    with pytest.raises(ShapeError, match="unsupported rank 1"):
        as_gemm_view((5,))


shapes = st.one_of(
    st.tuples(st.integers(1, 6), st.integers(1, 6)),
    st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3)),
)


@given(shapes, st.data())
def test_gemm_view_round_trip(shape, data):
    v = as_gemm_view(shape)
    r = data.draw(st.integers(0, v.rows - 1))
    c = data.draw(st.integers(0, v.cols - 1))
    assert v.gemm_coord(v.tensor_coord(r, c)) == (r, c)
    t = np.arange(np.prod(shape)).reshape(shape)
    assert v.matrix(t)[r, c] == t[v.tensor_coord(r, c)]
    np.testing.assert_array_equal(v.tensor(v.matrix(t)), t)


def test_im2col_single_window():
    x = np.array([[[1, 2], [3, 4]]], np.float32)
    np.testing.assert_array_equal(im2col(x, (2, 2)), [[1], [2], [3], [4]])


def test_im2col_3x3_hand_enumerated():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3)
    expected = np.array([[1, 2, 4, 5],
                         [2, 3, 5, 6],
                         [4, 5, 7, 8],
                         [5, 6, 8, 9]], np.float32)
    cols = im2col(x, (2, 2))
    np.testing.assert_array_equal(cols, expected)
    np.testing.assert_array_equal(cols[:, 0], [1, 2, 4, 5])


def test_im2col_padding_zeros_on_border():
    x = np.ones((2, 3, 3), np.float32)
    cols = im2col(x, (1, 1), pad=1)
    grid = cols.reshape(2, 5, 5)
    assert np.all(grid[:, 0, :] == 0) and np.all(grid[:, :, -1] == 0)
    assert np.all(grid[:, 1:4, 1:4] == 1)


def test_im2col_kernel_too_large():
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 2, 2)), (3, 3))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(1, 3),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31 - 1))
def test_im2col_gemm_matches_direct_conv(c, co, h, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, h))
    w = rng.standard_normal((co, c, k, k))
    cols = im2col(x, (k, k), stride, pad)
    got = as_gemm_view(w).matrix(w) @ cols
    ref = naive_conv(x, w, stride, pad).reshape(co, -1)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-9)


def test_im2col_batch_matches_single():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 2, 5, 5))
    b = im2col_batch(x, (3, 3), 2, 1)
    for n in range(3):
        np.testing.assert_array_equal(b[n], im2col(x[n], (3, 3), 2, 1))


def test_frobenius_norm():
    assert frobenius_norm(np.zeros((3, 3))) == 0.0
    assert frobenius_norm([3.0, 4.0]) == 5.0
    t = np.random.default_rng(3).standard_normal((10, 10)).astype(np.float32)
    oracle = 0.0
    for v in t.ravel():
        oracle += float(v) * float(v)
    assert abs(frobenius_norm(t) - oracle ** 0.5) <= 1e-6


def test_as_tensor_rejects_nan():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    assert as_tensor([[1, 2]]).dtype == np.float32
