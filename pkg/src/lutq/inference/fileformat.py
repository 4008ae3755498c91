"""Binary ``.lutq`` model files.

All integers are little-endian. Layout (format version 1)::

    header   b"LUTQ" | u8 version | u8 rank | u32 x rank input shape | u32 layer count
    record   u8 kind, then a kind-specific body:

    1 quant affine / 2 quant conv2d
        u8 rank | u32 x rank weight shape | u8 stride | u8 padding | u32 K
        u8 constraint-name length | constraint name (ascii) | u8 has_bias
        K x float32 dictionary                         <- payload
        ceil(N*bits/8) bytes assignment stream          <- payload (padding excluded)
        O x float64 bias (if has_bias)
    3 dense affine / 4 dense conv2d
        u8 rank | u32 x rank weight shape | u8 stride | u8 padding | u8 has_bias
        N x float64 weights | O x float64 bias (if has_bias)
    5 batchnorm
        u32 C | u8 pow2
        pow2:  C x i16 exponent | C x i8 sign (-1, 0, +1) | C x float64 offset
        else:  C x float64 scale | C x float64 offset
    6 relu, 8 flatten: no body
    7 act_quant: u8 bits | i16 log2(range)

The assignment stream holds ``A - 1`` at ``bits = ceil(log2 K)`` bits per
weight, weights in row-major order, each index least-significant bit first,
bits filled into bytes starting at bit 0. Each layer's stream is padded with
zero bits to a byte boundary.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError
from ..numerics import pow2_exponent
from .model import (ActQuantLayer, BNLayer, DenseLayer, FlattenLayer, PackedModel,
                    QuantLayer, ReluLayer, index_bits)

MAGIC = b"LUTQ"
VERSION = 1

_QAFFINE, _QCONV, _DAFFINE, _DCONV, _BN, _RELU, _ACTQ, _FLATTEN = range(1, 9)


def pack_assignments(A, K: int) -> bytes:
    nbits = index_bits(K)
    if nbits == 0:
        return b""
    idx = np.asarray(A, dtype=np.int64).reshape(-1) - 1
    bits = ((idx[:, None] >> np.arange(nbits)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_assignments(data: bytes, K: int, count: int) -> np.ndarray:
    nbits = index_bits(K)
    if nbits == 0:
        return np.ones(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count * nbits, bitorder="little")
    bits = bits.reshape(count, nbits).astype(np.int64)
    return (bits << np.arange(nbits)).sum(axis=1) + 1


class _Writer:
    def __init__(self):
        self.parts = []
        self.size = 0

    def put(self, fmt, *vals):
        self.raw(struct.pack("<" + fmt, *vals))

    def raw(self, data: bytes):
        self.parts.append(data)
        self.size += len(data)

    def array(self, arr, dtype):
        self.raw(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def serialize(model: PackedModel) -> bytes:
    w = _Writer()
    w.raw(MAGIC)
    w.put("B", VERSION)
    w.put("B", len(model.input_shape))
    for s in model.input_shape:
        w.put("I", s)
    w.put("I", len(model.layers))
    for layer in model.layers:
        if isinstance(layer, QuantLayer):
            w.put("B", _QAFFINE if layer.kind == "affine" else _QCONV)
            _put_shape(w, layer)
            w.put("I", layer.K)
            name = layer.constraint.encode("ascii")
            w.put("B", len(name))
            w.raw(name)
            w.put("B", layer.bias is not None)
            if not np.array_equal(np.asarray(layer.d, np.float32).astype(np.float64), layer.d):
                raise FormatError("dictionary values are not representable in 32 bits")
            if layer.A.size and (layer.A.min() < 1 or layer.A.max() > layer.K):
                raise FormatError("assignment index out of range")
            w.array(layer.d, "<f4")
            w.raw(pack_assignments(layer.A, layer.K))
            if layer.bias is not None:
                w.array(layer.bias, "<f8")
        elif isinstance(layer, DenseLayer):
            w.put("B", _DAFFINE if layer.kind == "affine" else _DCONV)
            _put_shape(w, layer)
            w.put("B", layer.bias is not None)
            w.array(layer.W, "<f8")
            if layer.bias is not None:
                w.array(layer.bias, "<f8")
        elif isinstance(layer, BNLayer):
            w.put("B", _BN)
            w.put("I", layer.channels)
            w.put("B", layer.pow2)
            if layer.pow2:
                w.array(pow2_exponent(layer.a), "<i2")
                w.array(np.sign(layer.a), "<i1")
            else:
                w.array(layer.a, "<f8")
            w.array(layer.b, "<f8")
        elif isinstance(layer, ReluLayer):
            w.put("B", _RELU)
        elif isinstance(layer, ActQuantLayer):
            w.put("B", _ACTQ)
            w.put("B", layer.bits)
            w.put("h", int(pow2_exponent(layer.r)))
        elif isinstance(layer, FlattenLayer):
            w.put("B", _FLATTEN)
        else:
            raise FormatError(f"cannot serialize layer {layer!r}")
    return b"".join(w.parts)


def _put_shape(w, layer):
    w.put("B", len(layer.shape))
    for s in layer.shape:
        w.put("I", s)
    w.put("B", layer.stride)
    w.put("B", layer.padding)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: need {n} bytes for {what} at byte offset {self.pos}, "
                              f"only {len(self.data) - self.pos} left")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def get(self, fmt: str, what: str):
        size = struct.calcsize("<" + fmt)
        vals = struct.unpack("<" + fmt, self.take(size, what))
        return vals[0] if len(vals) == 1 else vals

    def array(self, count: int, dtype: str, what: str):
        size = np.dtype(dtype).itemsize * count
        out = np.frombuffer(self.take(size, what), dtype=dtype)
        return out.astype(np.float64 if np.dtype(dtype).kind == "f" else np.int64)


def read_layout(data: bytes) -> list[dict]:
    """Byte spans of each quantized layer's payload, for auditing the storage formula."""
    _, layout = _deserialize(data)
    return layout


def deserialize(data: bytes) -> PackedModel:
    return _deserialize(data)[0]


def _deserialize(data: bytes):
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.get("B", "version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (this reader handles {VERSION})")
    rank = r.get("B", "input rank")
    input_shape = tuple(r.get("I", "input shape") for _ in range(rank))
    n_layers = r.get("I", "layer count")
    layers, layout = [], []
    for li in range(n_layers):
        start = r.pos
        kind = r.get("B", f"layer {li} kind")
        if kind in (_QAFFINE, _QCONV):
            shape, stride, padding = _get_shape(r, li)
            K = r.get("I", f"layer {li} K")
            if K < 1:
                raise FormatError(f"layer {li}: dictionary size 0 at byte offset {r.pos - 4}")
            name = r.take(r.get("B", "constraint length"), "constraint name").decode("ascii")
            has_bias = r.get("B", "bias flag")
            d_off = r.pos
            d = r.array(K, "<f4", f"layer {li} dictionary")
            n = int(np.prod(shape))
            nbits = index_bits(K)
            a_off = r.pos
            nbytes = (n * nbits + 7) // 8
            A = unpack_assignments(r.take(nbytes, f"layer {li} assignments"), K, n)
            if A.size and A.max() > K:
                raise FormatError(f"layer {li}: assignment index exceeds K={K} (byte offset {a_off})")
            bias = r.array(shape[0], "<f8", f"layer {li} bias") if has_bias else None
            layers.append(QuantLayer("affine" if kind == _QAFFINE else "conv2d", d, A.reshape(shape),
                                     bias, stride, padding, name))
            layout.append({"layer": li, "K": K, "N": n, "dictionary_bytes": a_off - d_off,
                           "assignment_bytes": nbytes, "assignment_bits": n * nbits,
                           "padding_bits": nbytes * 8 - n * nbits,
                           "payload_bits": (a_off - d_off) * 8 + n * nbits,
                           "record_bytes": r.pos - start})
        elif kind in (_DAFFINE, _DCONV):
            shape, stride, padding = _get_shape(r, li)
            has_bias = r.get("B", "bias flag")
            W = r.array(int(np.prod(shape)), "<f8", f"layer {li} weights").reshape(shape)
            bias = r.array(shape[0], "<f8", f"layer {li} bias") if has_bias else None
            layers.append(DenseLayer("affine" if kind == _DAFFINE else "conv2d", W, bias, stride, padding))
        elif kind == _BN:
            c = r.get("I", "channels")
            pow2 = bool(r.get("B", "pow2 flag"))
            if pow2:
                exps = r.array(c, "<i2", f"layer {li} exponents")
                signs = r.array(c, "<i1", f"layer {li} signs")
                a = np.where(signs == 0, 0.0, signs * np.ldexp(1.0, exps))
            else:
                a = r.array(c, "<f8", f"layer {li} scale")
            b = r.array(c, "<f8", f"layer {li} offset")
            layers.append(BNLayer(a, b, pow2))
        elif kind == _RELU:
            layers.append(ReluLayer())
        elif kind == _ACTQ:
            bits = r.get("B", "bits")
            e = r.get("h", "range exponent")
            layers.append(ActQuantLayer(bits, float(np.ldexp(1.0, e))))
        elif kind == _FLATTEN:
            layers.append(FlattenLayer())
        else:
            raise FormatError(f"unknown layer kind {kind} at byte offset {start}")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last layer (byte offset {r.pos})")
    return PackedModel(input_shape, layers), layout


def _get_shape(r, li):
    rank = r.get("B", f"layer {li} rank")
    if rank not in (2, 4):
        raise FormatError(f"layer {li}: weight rank {rank} is neither 2 nor 4 (byte offset {r.pos - 1})")
    shape = tuple(r.get("I", f"layer {li} shape") for _ in range(rank))
    stride = r.get("B", "stride")
    padding = r.get("B", "padding")
    return shape, stride, padding


def save(model: PackedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load(path) -> PackedModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
