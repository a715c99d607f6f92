import struct

import numpy as np
import pytest

from microunify.data import DataError, gen_synthetic, load_idx, synthetic_classify, synthetic_images, write_idx


def idx_bytes(magic, dims, payload):
    return struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload)


def test_hand_built_idx(tmp_path):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(idx_bytes(0x803, (2, 2, 3), range(0, 240, 20)))
    lab.write_bytes(idx_bytes(0x801, (2,), [1, 0]))
    ds = load_idx(img, lab)
    assert ds.x.shape == (2, 1, 2, 3) and ds.y.tolist() == [1, 0]
    assert ds.x[0, 0, 0, 1] == pytest.approx(20 / 255)
    unlabeled = load_idx(img)
    assert np.array_equal(unlabeled.x, unlabeled.y)


def test_idx_errors(tmp_path):
    img = tmp_path / "img.idx"
    img.write_bytes(idx_bytes(0x803, (2, 2, 2), range(8)))
    lab = tmp_path / "lab.idx"
    lab.write_bytes(idx_bytes(0x801, (3,), [0, 1, 2]))
    with pytest.raises(DataError, match="2 images but 3 labels"):
        load_idx(img, lab)
    empty = tmp_path / "empty.idx"
    empty.write_bytes(b"")
    with pytest.raises(DataError):
        load_idx(empty)
    short = tmp_path / "short.idx"
    short.write_bytes(idx_bytes(0x803, (2, 2, 2), range(5)))
    with pytest.raises(DataError, match="truncated"):
        load_idx(short)
    bad = tmp_path / "bad.idx"
    bad.write_bytes(idx_bytes(0x804, (1, 1, 1, 1), [0]))
    with pytest.raises(DataError, match="magic"):
        load_idx(bad)


def test_write_idx_round_trip(tmp_path):
    a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx", a)
    np.testing.assert_array_equal(load_idx(tmp_path / "a.idx").x[:, 0] * 255, a)


def test_synthetic_deterministic():
    a, b = synthetic_classify(4), synthetic_classify(4)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert synthetic_images(2).x.tobytes() == gen_synthetic(2, "synthetic_images").x.tobytes()
    with pytest.raises(DataError):
        gen_synthetic(0, "cifar")


def test_blobs_are_linearly_separable():
    ds = synthetic_classify(0, classes=3, dim=32, n=900)
    X = np.hstack([ds.x.astype(np.float64), np.ones((len(ds), 1))])
    Y = np.eye(3)[ds.y]
    train, test = slice(0, 600), slice(600, None)
    coef, *_ = np.linalg.lstsq(X[train], Y[train], rcond=None)
    acc = np.mean(np.argmax(X[test] @ coef, axis=1) == ds.y[test])
    assert acc >= 0.99


def test_class_means_far_apart():
    ds = synthetic_classify(1, n=3000)
    means = np.stack([ds.x[ds.y == c].mean(axis=0) for c in range(3)])
    d = [np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)]
    assert min(d) >= 6.0


def test_images_in_unit_range():
    x = synthetic_images(3, size=8, n=50).x
    assert x.shape == (50, 1, 8, 8) and x.min() >= 0 and x.max() <= 1
