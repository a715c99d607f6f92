"""Datasets: seeded synthetic tasks and an IDX-format loader."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} inputs but {len(self.y)} targets")

    def __len__(self) -> int:
        return len(self.x)

    def batches(self, batch_size: int | None, rng: np.random.Generator | None = None):
        """Yield (x, y) minibatches; shuffled when `rng` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        step = n if not batch_size else batch_size
        for s in range(0, n, step):
            idx = order[s : s + step]
            yield self.x[idx], self.y[idx]

    def split(self, test_fraction: float) -> tuple[Dataset, Dataset]:
        n_test = int(round(len(self) * test_fraction))
        cut = len(self) - n_test
        return Dataset(self.x[:cut], self.y[:cut]), Dataset(self.x[cut:], self.y[cut:])


def synthetic_classify(seed: int = 0, classes: int = 3, dim: int = 32, n: int = 600,
                       sigma: float = 1.0, spread: float = 5.0, margin: float = 1.0) -> Dataset:
    """Gaussian blobs around orthogonal class means.

    Means sit `spread` * sigma along orthonormal directions, so pairwise mean
    distance is sqrt(2) * spread * sigma.  Samples whose noise would bring
    them within `margin` of a pairwise bisector are redrawn, which leaves the
    classes linearly separable with that margin.
    """
    if classes > dim:
        raise DataError("need dim >= classes for orthogonal class means")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    means = spread * sigma * basis[:, :classes].T
    labels = rng.integers(0, classes, size=n)
    x = np.empty((n, dim))
    for i, c in enumerate(labels):
        while True:
            sample = means[c] + sigma * rng.standard_normal(dim)
            d = means - means[c]
            dist = np.linalg.norm(d, axis=1)
            others = dist > 0
            # signed distance to each bisector between class c and another class
            gap = dist[others] / 2 - (sample - means[c]) @ (d[others].T / dist[others])
            if np.all(gap >= margin):
                break
        x[i] = sample
    return Dataset(x.astype(np.float32), labels.astype(np.int64))


def synthetic_images(seed: int = 0, size: int = 8, n: int = 256, waves: int = 3,
                     max_freq: int = 2) -> Dataset:
    """Band-limited sinusoidal textures in [0, 1], shape (n, 1, size, size).

    Targets equal inputs (reconstruction task).
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    imgs = np.zeros((n, size, size))
    for i in range(n):
        for _ in range(waves):
            fx, fy = rng.integers(0, max_freq + 1, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            imgs[i] += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        lo, hi = imgs[i].min(), imgs[i].max()
        imgs[i] = (imgs[i] - lo) / (hi - lo) if hi > lo else 0.5
    x = imgs[:, None].astype(np.float32)
    return Dataset(x, x.copy())


def gen_synthetic(seed: int, kind: str, **kwargs) -> Dataset:
    if kind == "synthetic_classify":
        return synthetic_classify(seed, **kwargs)
    if kind == "synthetic_images":
        return synthetic_images(seed, **kwargs)
    raise DataError(f"unknown synthetic dataset {kind!r}")


# --- IDX -------------------------------------------------------------------

def _read_idx(path) -> tuple[int, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: empty or truncated IDX file")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DataError(f"{path}: truncated IDX payload ({len(raw) - head} of {count} bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)
    return magic, data


def load_idx(images_path, labels_path=None) -> Dataset:
    """Load ubyte IDX images (and optional labels), scaled to [0, 1].

    Images come back as (N, 1, H, W).  Without labels the targets are the
    images themselves.
    """
    magic, imgs = _read_idx(images_path)
    if magic != IDX_IMAGES:
        raise DataError(f"{images_path}: expected image magic 0x{IDX_IMAGES:08x}")
    x = (imgs.astype(np.float32) / 255.0)[:, None]
    if labels_path is None:
        return Dataset(x, x.copy())
    magic, labels = _read_idx(labels_path)
    if magic != IDX_LABELS:
        raise DataError(f"{labels_path}: expected label magic 0x{IDX_LABELS:08x}")
    if len(labels) != len(x):
        raise DataError(f"{len(x)} images but {len(labels)} labels")
    return Dataset(x, labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-dim images or 1-dim labels)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}.get(a.ndim)
    if magic is None:
        raise DataError(f"IDX writer handles rank 1 or 3, got {a.ndim}")
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())
