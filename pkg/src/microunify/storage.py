"""Bit-exact compressed model format and compression-ratio accounting.

Layout (all little-endian)::

    b"MSU1"  u16 version  u32 layer_count
    per layer:
        u32 id  u8 method  u8 block_rank  block_rank * u32 block dims
        u32 layer_rank  layer_rank * u32 layer dims
        u32 constrained_count  constrained_count * u32 block index
        f32 magnitudes            one per unified block
        u8  bitmap                sign bits of unified coefficients, or the
                                  keep mask of N:M blocks; LSB first, padded
                                  to a byte
        f32 raw coefficients      unconstrained blocks in partition order,
                                  then (N:M) kept values; all coefficients
                                  in row-major order for method none
        u32 bias_count  bias_count * f32 bias
    u32 arch_len  arch_len bytes UTF-8 architecture text
    u32 CRC-32 (IEEE) of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .blocking import BlockShape, partition
from .nn import Model
from .projection import ConstraintReport, LayerReport

MAGIC = b"MSU1"
VERSION = 1
METHOD_CODES = {"none": 0, "unify": 1, "prune": 2, "nm_prune": 3}
METHOD_NAMES = {v: k for k, v in METHOD_CODES.items()}


class FormatError(ValueError):
    """The byte stream is not a valid compressed model."""


class ChecksumError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


@dataclass
class CompressedLayer:
    id: int
    method: str
    block_dims: tuple[int, ...]
    shape: tuple[int, ...]
    blocks: np.ndarray
    magnitudes: np.ndarray
    bitmap: np.ndarray  # bool, unpacked
    raw: np.ndarray
    bias: np.ndarray

    @property
    def num_coefficients(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class CompressedModel:
    layers: list[CompressedLayer] = field(default_factory=list)
    arch: str = ""
    version: int = VERSION


# --- encode ----------------------------------------------------------------

def _layer_record(i: int, w: np.ndarray, bias: np.ndarray, rep: LayerReport | None) -> CompressedLayer:
    w = np.asarray(w, np.float32)
    method = "none" if rep is None else rep.method
    if method == "none":
        return CompressedLayer(i, "none", (), w.shape, np.zeros(0, np.int64), np.zeros(0, np.float32),
                               np.zeros(0, bool), w.ravel().copy(), np.asarray(bias, np.float32))
    p = partition(w.shape, rep.block_shape)
    vals = w.ravel()[p.indices]
    picked = np.zeros(p.num_blocks, bool)
    blocks = np.asarray(rep.blocks, np.int64)
    picked[blocks] = True
    coef = np.repeat(picked, p.sizes)
    mags = np.zeros(0, np.float32)
    bitmap = np.zeros(0, bool)
    if method == "unify":
        mags = np.asarray(rep.magnitudes, np.float32)
        bitmap = np.signbit(vals[coef])
        raw = vals[~coef]
    elif method == "prune":
        raw = vals[~coef]
    else:
        bitmap = vals.view(np.uint32)[coef] != 0
        raw = np.concatenate([vals[~coef], vals[coef][bitmap]])
    return CompressedLayer(i, method, rep.block_shape.dims, w.shape, blocks, mags, bitmap,
                           raw.astype(np.float32), np.asarray(bias, np.float32))


def to_compressed(model: Model, report: ConstraintReport | None = None) -> CompressedModel:
    report = report or ConstraintReport()
    arch = f"arch={model.describe()}\ninput={'x'.join(map(str, model.input_shape))}\nloss={model.loss}\n"
    layers = [_layer_record(i, layer.w, layer.b, report.layers.get(i))
              for i, layer in model.trainable_layers().items()]
    return CompressedModel(layers, arch)


def encode(cm: CompressedModel) -> bytes:
    out = [MAGIC, struct.pack("<HI", cm.version, len(cm.layers))]
    for L in cm.layers:
        out.append(struct.pack("<IBB", L.id, METHOD_CODES[L.method], len(L.block_dims)))
        out.append(struct.pack(f"<{len(L.block_dims)}I", *L.block_dims))
        out.append(struct.pack(f"<I{len(L.shape)}I", len(L.shape), *L.shape))
        out.append(struct.pack("<I", len(L.blocks)) + np.asarray(L.blocks, "<u4").tobytes())
        out.append(np.asarray(L.magnitudes, "<f4").tobytes())
        out.append(np.packbits(np.asarray(L.bitmap, np.uint8), bitorder="little").tobytes())
        out.append(np.asarray(L.raw, "<f4").tobytes())
        out.append(struct.pack("<I", len(L.bias)) + np.asarray(L.bias, "<f4").tobytes())
    arch = cm.arch.encode("utf-8")
    out.append(struct.pack("<I", len(arch)) + arch)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def serialize(model: Model, report: ConstraintReport | None = None) -> bytes:
    return encode(to_compressed(model, report))


# --- decode ----------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, stream has {len(self.buf)}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * np.dtype(dtype).itemsize), dtype=dtype).copy()


def decode(buf: bytes) -> CompressedModel:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < 4 + 2 + 4 + 4 + 4:
        raise TruncatedError(f"stream of {len(buf)} bytes is shorter than the minimal file")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise ChecksumError("CRC-32 mismatch")
    r = _Reader(buf[:-4])
    r.take(4)
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    layers = []
    for _ in range(count):
        lid, code, brank = r.unpack("<IBB")
        if code not in METHOD_NAMES:
            raise FormatError(f"unknown method code {code}")
        method = METHOD_NAMES[code]
        bdims = r.unpack(f"<{brank}I")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        (nblk,) = r.unpack("<I")
        blocks = r.array("<u4", nblk).astype(np.int64)
        n_coef = int(np.prod(shape))
        if method == "none":
            mags, bitmap, n_raw = np.zeros(0, np.float32), np.zeros(0, bool), n_coef
        else:
            p = partition(shape, BlockShape(bdims))
            if nblk and (blocks.max() >= p.num_blocks):
                raise FormatError(f"layer {lid}: block index out of range")
            in_blocks = int(p.sizes[blocks].sum())
            n_mag = nblk if method == "unify" else 0
            n_bits = in_blocks if method in ("unify", "nm_prune") else 0
            mags = r.array("<f4", n_mag)
            packed = np.frombuffer(r.take((n_bits + 7) // 8), np.uint8)
            bitmap = np.unpackbits(packed, count=n_bits, bitorder="little").astype(bool)
            n_raw = n_coef - in_blocks + (int(bitmap.sum()) if method == "nm_prune" else 0)
        raw = r.array("<f4", n_raw)
        (nb,) = r.unpack("<I")
        bias = r.array("<f4", nb)
        layers.append(CompressedLayer(lid, method, tuple(bdims), tuple(shape), blocks,
                                      mags.astype(np.float32), bitmap, raw.astype(np.float32),
                                      bias.astype(np.float32)))
    (alen,) = r.unpack("<I")
    try:
        arch = r.take(alen).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("architecture text is not UTF-8") from exc
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes before checksum")
    return CompressedModel(layers, arch, version)


def dense_weights(L: CompressedLayer) -> tuple[np.ndarray, LayerReport | None]:
    """Rebuild a layer's dense float32 weights and its report."""
    if L.method == "none":
        return L.raw.reshape(L.shape).copy(), None
    p = partition(L.shape, BlockShape(L.block_dims))
    picked = np.zeros(p.num_blocks, bool)
    picked[L.blocks] = True
    coef = np.repeat(picked, p.sizes)
    vals = np.zeros(p.num_coefficients, np.float32)
    n_free = int((~coef).sum())
    vals[~coef] = L.raw[:n_free]
    rep = LayerReport(L.id, L.method, BlockShape(L.block_dims), blocks=L.blocks.copy(),
                      ragged=p.ragged, num_blocks=p.num_blocks)
    if L.method == "unify":
        q = np.repeat(L.magnitudes, p.sizes[L.blocks])
        vals[coef] = np.where(L.bitmap, -q, q)
        rep.magnitudes = L.magnitudes.copy()
        rep.signs = L.bitmap.copy()
    elif L.method == "nm_prune":
        inner = np.zeros(int(coef.sum()), np.float32)
        inner[L.bitmap] = L.raw[n_free:]
        vals[coef] = inner
        keep = np.zeros(p.num_coefficients, bool)
        keep[coef] = L.bitmap
        rep.keep = keep
    out = np.empty(p.num_coefficients, np.float32)
    out[p.indices] = vals
    return out.reshape(L.shape), rep


def parse_arch_text(text: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def from_compressed(cm: CompressedModel) -> tuple[Model, ConstraintReport]:
    meta = parse_arch_text(cm.arch)
    if "arch" not in meta:
        raise FormatError("file carries no architecture description")
    shape = tuple(int(s) for s in meta.get("input", "").split("x") if s)
    model = Model.from_arch(meta["arch"], shape, meta.get("loss", "softmax_cross_entropy"), seed=None)
    layers = model.trainable_layers()
    report = ConstraintReport()
    for L in cm.layers:
        if L.id not in layers or tuple(layers[L.id].w.shape) != L.shape:
            raise FormatError(f"layer {L.id} does not match the architecture")
        w, rep = dense_weights(L)
        layers[L.id].w[...] = w
        if len(L.bias) != len(layers[L.id].b):
            raise FormatError(f"layer {L.id}: bias length {len(L.bias)}")
        layers[L.id].b[...] = L.bias
        if rep is not None:
            report.layers[L.id] = rep
    model.touch()
    return model, report


def deserialize(buf: bytes) -> tuple[Model, ConstraintReport]:
    return from_compressed(decode(buf))


def encoded_size(cm: CompressedModel) -> int:
    """Byte size of `encode(cm)` computed from the format definition."""
    size = 4 + 2 + 4
    for L in cm.layers:
        size += 4 + 1 + 1 + 4 * len(L.block_dims) + 4 + 4 * len(L.shape)
        size += 4 + 4 * len(L.blocks) + 4 * len(L.magnitudes) + (len(L.bitmap) + 7) // 8
        size += 4 * len(L.raw) + 4 + 4 * len(L.bias)
    return size + 4 + len(cm.arch.encode("utf-8")) + 4


# --- compression ratio -----------------------------------------------------

@dataclass
class StorageCost:
    total: int  # weight coefficients
    raw: int  # stored full-precision coefficients
    magnitudes: int
    sign_bits: int
    mask_bits: int

    def ratio(self, accounting: str = "magnitudes_only") -> float:
        stored = self.raw + self.magnitudes
        if accounting == "with_sign_bits":
            stored += (self.sign_bits + self.mask_bits) / 32
        elif accounting != "magnitudes_only":
            raise ValueError(f"unknown accounting {accounting!r}")
        return self.total / stored if stored else float("inf")


def storage_cost(model: Model, report: ConstraintReport | None = None) -> StorageCost:
    """Count stored coefficient-equivalents over all trainable weights.

    Unified blocks cost one magnitude plus one sign bit per coefficient;
    pruned blocks cost nothing.  A layer whose blocks are only partly
    constrained also pays one mask bit per block; N:M blocks pay one mask
    bit per coefficient.
    """
    report = report or ConstraintReport()
    cost = StorageCost(0, 0, 0, 0, 0)
    for i, layer in model.trainable_layers().items():
        n = int(layer.w.size)
        cost.total += n
        rep = report.layers.get(i)
        if rep is None or rep.method == "none":
            cost.raw += n
            continue
        p = partition(layer.w.shape, rep.block_shape)
        blocks = np.asarray(rep.blocks, np.int64)
        in_blocks = int(p.sizes[blocks].sum())
        if 0 < len(blocks) < p.num_blocks:
            cost.mask_bits += p.num_blocks
        if rep.method == "unify":
            cost.raw += n - in_blocks
            cost.magnitudes += len(blocks)
            cost.sign_bits += in_blocks
        elif rep.method == "prune":
            cost.raw += n - in_blocks
        else:
            kept = int(np.count_nonzero(rep.keep))
            cost.raw += n - in_blocks + kept
            cost.mask_bits += in_blocks
    return cost


def compression_ratio(model: Model, report: ConstraintReport | None = None,
                      accounting: str = "magnitudes_only") -> float:
    return storage_cost(model, report).ratio(accounting)
