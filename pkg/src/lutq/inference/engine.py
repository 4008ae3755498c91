"""Quantized inference with exact operation counting.

Three execution modes:

``dense``
    float arithmetic with the tied weights ``Q = d[A]`` (``O*I`` multiplies per
    affine output vector).
``bucket``
    float arithmetic, but each output sums its inputs per dictionary entry first
    and multiplies once per non-empty, non-zero bucket (at most ``K`` per output).
``shift``
    integer arithmetic on :class:`FixedPointTensor` values. Power-of-two
    dictionary entries become left shifts of the bucket sums. BN either
    multiplies by its folded scale (quasi multiplier-less) or, when the scales
    are powers of two, shifts as well (fully multiplier-less).

Every arithmetic step goes through an :class:`OpCounter`, which counts the
elements each numpy operation actually produced.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..autodiff import im2col
from ..errors import LutqError, ModeError
from ..numerics import is_pow2, pow2_exponent, round_half_away
from .model import (ActQuantLayer, BNLayer, DenseLayer, FlattenLayer, PackedModel,
                    QuantLayer, ReluLayer)

MODES = ("dense", "bucket", "shift")
ACC_BITS = 32
WIDE_BITS = 64
# offsets are added on a grid of 2**OFFSET_RESOLUTION absolute value units
OFFSET_RESOLUTION = -40
# fraction bits of a BN scale in quasi (multiplying) fixed-point mode
SCALE_BITS = 24


class AccumulatorOverflow(LutqError, OverflowError):
    exit_code = 6


@dataclass
class FixedPointTensor:
    """Integer mantissas sharing one exponent: ``value = mantissa * 2**exponent * step``.

    ``step`` is the activation grid spacing ``r / (2**(b-1) - 1)``. It is not a
    power of two, so it is carried symbolically and never multiplied at run time.
    """

    mantissa: np.ndarray
    exponent: int = 0
    step: float = 1.0
    bits: int = 8

    def __post_init__(self):
        self.mantissa = np.asarray(self.mantissa, dtype=np.int64)
        limit = (1 << (self.bits - 1)) - 1
        if self.mantissa.size and int(np.max(np.abs(self.mantissa))) > limit:
            raise AccumulatorOverflow(f"mantissa exceeds signed {self.bits}-bit range")

    @classmethod
    def quantize(cls, x, bits: int, r: float) -> "FixedPointTensor":
        qmax = 2 ** (bits - 1) - 1
        m = np.clip(round_half_away(np.asarray(x, dtype=np.float64) * (qmax / r)), -qmax, qmax)
        return cls(m.astype(np.int64), 0, r / qmax, bits)

    def dequantize(self) -> np.ndarray:
        return np.ldexp(self.mantissa.astype(np.float64), self.exponent) * self.step

    @property
    def shape(self):
        return self.mantissa.shape


@dataclass
class LayerOps:
    index: int
    kind: str
    multiplications: int = 0
    shifts: int = 0
    additions: int = 0
    lookups: int = 0


@dataclass
class OpCountReport:
    mode: str
    bn_mode: str
    samples: int
    layers: list[LayerOps] = field(default_factory=list)

    def total(self, what: str) -> int:
        return sum(getattr(l, what) for l in self.layers)

    @property
    def multiplications(self) -> int:
        return self.total("multiplications")

    @property
    def totals(self) -> dict:
        return {k: self.total(k) for k in ("multiplications", "shifts", "additions", "lookups")}

    @property
    def multiplier_class(self) -> str:
        if self.multiplications == 0:
            return "fully multiplier-less"
        if all(l.multiplications == 0 for l in self.layers if l.kind in ("affine", "conv2d")):
            return "quasi multiplier-less"
        return "unconstrained"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "bn_mode": self.bn_mode, "samples": self.samples,
                "multiplier_class": self.multiplier_class, "totals": self.totals,
                "layers": [asdict(l) for l in self.layers]}

    def to_text(self) -> str:
        head = f"{'layer':>5} {'kind':<10} {'mults':>12} {'shifts':>12} {'adds':>12} {'lookups':>12}"
        rows = [f"mode={self.mode} bn={self.bn_mode} samples={self.samples} ({self.multiplier_class})", head]
        for l in self.layers:
            rows.append(f"{l.index:>5} {l.kind:<10} {l.multiplications:>12} {l.shifts:>12} "
                        f"{l.additions:>12} {l.lookups:>12}")
        t = self.totals
        rows.append(f"{'total':>5} {'':<10} {t['multiplications']:>12} {t['shifts']:>12} "
                    f"{t['additions']:>12} {t['lookups']:>12}")
        return "\n".join(rows)


class OpCounter:
    """Performs elementwise arithmetic and counts the elements produced."""

    def __init__(self):
        self.rows: list[LayerOps] = []
        self.cur = LayerOps(-1, "none")

    def layer(self, index: int, kind: str):
        self.cur = LayerOps(index, kind)
        self.rows.append(self.cur)

    def mul(self, a, b):
        out = np.multiply(a, b)
        self.cur.multiplications += out.size
        return out

    def add(self, a, b):
        out = np.add(a, b)
        self.cur.additions += out.size
        return out

    def neg(self, a):
        out = np.negative(a)
        self.cur.additions += out.size
        return out

    def lshift(self, a, amount):
        out = np.left_shift(a, amount)
        self.cur.shifts += int(np.count_nonzero(np.broadcast_to(amount, out.shape)))
        return out

    def rshift(self, a, amount):
        out = np.right_shift(a, amount)
        self.cur.shifts += out.size
        return out

    def gather(self, x, idx, axis):
        out = np.take(x, idx, axis=axis)
        self.cur.lookups += out.size
        return out

    def segment_sum(self, x, starts):
        """Sum runs of ``x`` along axis 1 that begin at ``starts``."""
        out = np.add.reduceat(x, starts, axis=1)
        self.cur.additions += x.shape[0] * (x.shape[1] - len(starts))
        return out

    def matmul(self, x, W):
        """``x @ W.T`` counted as one multiply per product and ``I-1`` adds per output."""
        out = x @ W.T
        self.cur.multiplications += x.shape[0] * W.shape[0] * W.shape[1]
        self.cur.additions += x.shape[0] * W.shape[0] * (W.shape[1] - 1)
        return out


# ---------------------------------------------------------------------------
# bucket plans


@dataclass
class _BucketPlan:
    """Non-pruned connections of an ``O x I`` assignment grouped into (output, entry) buckets."""

    n_out: int
    order: np.ndarray       # input index of each connection, bucket-contiguous
    starts: np.ndarray      # first connection of each bucket
    seg_k: np.ndarray       # 0-based dictionary entry of each bucket
    row_starts: np.ndarray  # first bucket of each output that has any
    rows: np.ndarray        # those outputs

    @classmethod
    def build(cls, d, A2):
        O, _ = A2.shape
        K = d.size
        idx = A2 - 1
        o_idx, i_idx = np.nonzero(d[idx] != 0)
        keys = o_idx * K + idx[o_idx, i_idx]
        srt = np.argsort(keys, kind="stable")
        keys, order = keys[srt], i_idx[srt]
        if keys.size == 0:
            empty = np.zeros(0, dtype=np.int64)
            return cls(O, empty, empty, empty, empty, empty)
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
        seg = keys[starts]
        seg_out, seg_k = seg // K, seg % K
        row_starts = np.flatnonzero(np.r_[True, seg_out[1:] != seg_out[:-1]])
        return cls(O, order, starts, seg_k, row_starts, seg_out[row_starts])


def bucket_sum_affine(x, d, A, counter: OpCounter | None = None):
    """``y_o = sum_k d_k * (sum of x_i with A_oi = k)``; zero entries and empty buckets cost nothing."""
    counter = counter or OpCounter()
    d = np.asarray(d, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    plan = _BucketPlan.build(d, np.asarray(A))
    y = np.zeros((x2.shape[0], plan.n_out))
    if plan.order.size:
        sums = counter.segment_sum(counter.gather(x2, plan.order, axis=1), plan.starts)
        prods = counter.mul(sums, d[plan.seg_k])
        y[:, plan.rows] = counter.segment_sum(prods, plan.row_starts)
    return y[0] if single else y


def _check_bound(values, bits, what):
    if values.size and int(np.max(np.abs(values))) >= (1 << (bits - 1)):
        raise AccumulatorOverflow(f"{what} overflows a {bits}-bit accumulator")


def shift_affine(x: FixedPointTensor, d, A, counter: OpCounter | None = None) -> FixedPointTensor:
    """Bucket sums of integer mantissas, each shifted by its dictionary exponent; no multiplies.

    Output exponent is ``x.exponent + min_k e_k``; bucket ``k`` is shifted left by
    ``e_k - min e``. Raises :class:`ModeError` for a non power-of-two dictionary.
    """
    counter = counter or OpCounter()
    d = np.asarray(d, dtype=np.float64)
    live = d != 0
    if not np.all(is_pow2(d[live])):
        raise ModeError("shift mode needs every non-zero dictionary value to be a power of two")
    m = x.mantissa
    single = m.ndim == 1
    m2 = m[None, :] if single else m
    plan = _BucketPlan.build(d, np.asarray(A))
    acc = np.zeros((m2.shape[0], plan.n_out), dtype=np.int64)
    exps = pow2_exponent(d)
    e_min = int(exps[live].min()) if live.any() else 0
    if plan.order.size:
        sums = counter.segment_sum(counter.gather(m2, plan.order, axis=1), plan.starts)
        amount = (exps[plan.seg_k] - e_min).astype(np.int64)
        if sums.size and int(np.max(np.abs(sums))) << int(amount.max()) >= (1 << (ACC_BITS - 1)):
            raise AccumulatorOverflow(f"shifted bucket sums overflow a {ACC_BITS}-bit accumulator")
        terms = counter.lshift(sums, amount[None, :])
        neg = d[plan.seg_k] < 0
        if neg.any():
            terms[:, neg] = counter.neg(terms[:, neg])
        acc[:, plan.rows] = counter.segment_sum(terms, plan.row_starts)
        _check_bound(acc, ACC_BITS, "affine accumulation")
    out = acc[0] if single else acc
    return FixedPointTensor(out, x.exponent + e_min, x.step, WIDE_BITS)


# ---------------------------------------------------------------------------
# model execution


def _conv_rows(x, layer):
    """im2col as rows: (R, C, H, W) -> (R*P, I), plus the output geometry."""
    o, c, kh, kw = layer.shape
    cols, (oh, ow) = im2col(x, kh, kw, layer.stride, layer.padding)
    rows = cols.transpose(0, 2, 1).reshape(-1, c * kh * kw)
    return rows, (x.shape[0], o, oh, ow)


def _rows_to_conv(y, geom):
    r, o, oh, ow = geom
    return y.reshape(r, oh * ow, o).transpose(0, 2, 1).reshape(r, o, oh, ow)


def _channel(v, ndim):
    return np.asarray(v).reshape((1, -1) + (1,) * (ndim - 2))


def _float_weight_layer(layer, x, mode, counter):
    if layer.kind == "conv2d":
        rows, geom = _conv_rows(x, layer)
    else:
        rows, geom = x, None
    A2 = None
    if isinstance(layer, QuantLayer):
        A2 = layer.A.reshape(layer.shape[0], -1)
    if mode == "bucket":
        y = bucket_sum_affine(rows, layer.d, A2, counter)
    else:
        if isinstance(layer, QuantLayer):
            W2 = counter.gather(layer.d, A2 - 1, axis=0)
        else:
            W2 = layer.W.reshape(layer.shape[0], -1)
        y = counter.matmul(rows, W2)
    if geom is not None:
        y = _rows_to_conv(y, geom)
    if layer.bias is not None:
        y = counter.add(y, _channel(layer.bias, y.ndim))
    return y


def _float_act_quant(layer, x, counter):
    m = np.clip(round_half_away(counter.mul(x, layer.qmax / layer.r)), -layer.qmax, layer.qmax)
    return counter.mul(m, layer.step)


def _run_float(model, x, mode, counter):
    if isinstance(x, FixedPointTensor):
        x = x.dequantize()
    x = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(model.layers):
        counter.layer(i, _kind(layer))
        if isinstance(layer, (QuantLayer, DenseLayer)):
            x = _float_weight_layer(layer, x, mode, counter)
        elif isinstance(layer, BNLayer):
            x = counter.add(counter.mul(x, _channel(layer.a, x.ndim)), _channel(layer.b, x.ndim))
        elif isinstance(layer, ReluLayer):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, ActQuantLayer):
            x = _float_act_quant(layer, x, counter)
        elif isinstance(layer, FlattenLayer):
            x = x.reshape(x.shape[0], -1)
    return x


def _refine(t: FixedPointTensor, counter) -> FixedPointTensor:
    """Move mantissas onto the fine offset grid (left shift) if they are coarser."""
    target = math.floor(math.log2(2.0 ** OFFSET_RESOLUTION / t.step))
    if t.exponent <= target:
        return t
    amount = t.exponent - target
    if t.mantissa.size and int(np.max(np.abs(t.mantissa))) << amount >= (1 << (WIDE_BITS - 2)):
        raise AccumulatorOverflow("offset stage overflows the 64-bit accumulator")
    return FixedPointTensor(counter.lshift(t.mantissa, amount), target, t.step, WIDE_BITS)


def _add_offset(t: FixedPointTensor, offset, counter) -> FixedPointTensor:
    t = _refine(t, counter)
    # constant folding: offsets become integers on the tensor's grid once per layer
    off = round_half_away(np.ldexp(np.asarray(offset, dtype=np.float64) / t.step, -t.exponent))
    off = _channel(off.astype(np.int64), t.mantissa.ndim)
    out = counter.add(t.mantissa, off)
    _check_bound(out, WIDE_BITS - 1, "offset addition")
    return FixedPointTensor(out, t.exponent, t.step, WIDE_BITS)


def _shift_bn(layer: BNLayer, t: FixedPointTensor, bn_mode, counter) -> FixedPointTensor:
    nd = t.mantissa.ndim
    a = layer.a
    if bn_mode == "shift":
        live = a != 0
        exps = pow2_exponent(a)
        e_min = int(exps[live].min()) if live.any() else 0
        amount = _channel(np.where(live, exps - e_min, 0), nd)
        if t.mantissa.size and live.any():
            if int(np.max(np.abs(t.mantissa))) << int(amount.max()) >= (1 << (WIDE_BITS - 2)):
                raise AccumulatorOverflow("BN shift overflows the 64-bit accumulator")
        m = counter.lshift(t.mantissa, amount)
        neg = _channel(a < 0, nd)
        if neg.any():
            m = np.where(neg, -m, m)
            counter.cur.additions += int(np.count_nonzero(np.broadcast_to(neg, m.shape)))
        m = np.where(_channel(live, nd), m, 0)
        scaled = FixedPointTensor(m, t.exponent + e_min, t.step, WIDE_BITS)
    else:
        top = float(np.max(np.abs(a))) if a.size else 0.0
        frac = SCALE_BITS - (math.ceil(math.log2(top)) if top > 0 else 0)
        a_int = round_half_away(np.ldexp(a, frac)).astype(np.int64)
        if t.mantissa.size and a_int.size:
            if int(np.max(np.abs(t.mantissa))) * int(np.max(np.abs(a_int))) >= (1 << (WIDE_BITS - 2)):
                raise AccumulatorOverflow("BN product overflows the 64-bit accumulator")
        m = counter.mul(t.mantissa, _channel(a_int, nd))
        scaled = FixedPointTensor(m, t.exponent - frac, t.step, WIDE_BITS)
    return _add_offset(scaled, layer.b, counter)


def _shift_act_quant(layer: ActQuantLayer, t: FixedPointTensor, counter) -> FixedPointTensor:
    ratio = t.step / layer.step
    if not is_pow2(ratio):
        raise ModeError("shift mode needs power-of-two ratios between activation grids "
                        "(all act_quant layers must share one bitwidth)")
    sh = t.exponent + int(pow2_exponent(ratio))
    m = t.mantissa
    if sh > 0:
        if m.size and int(np.max(np.abs(m))) << sh >= (1 << (WIDE_BITS - 2)):
            raise AccumulatorOverflow("requantization overflows the 64-bit accumulator")
        m = counter.lshift(m, sh)
    elif sh < 0:
        # round half away from zero: (|m| + 2^(s-1)) >> s, sign restored
        mag = counter.add(np.abs(m), 1 << (-sh - 1))
        mag = counter.rshift(mag, -sh)
        m = np.where(m < 0, -mag, mag)
    m = np.clip(m, -layer.qmax, layer.qmax)
    return FixedPointTensor(m, 0, layer.step, layer.bits)


def _shift_weight_layer(layer: QuantLayer, t: FixedPointTensor, counter) -> FixedPointTensor:
    if layer.kind == "conv2d":
        rows, geom = _conv_rows(t.mantissa, layer)
    else:
        rows, geom = t.mantissa, None
    A2 = layer.A.reshape(layer.shape[0], -1)
    out = shift_affine(FixedPointTensor(rows, t.exponent, t.step, WIDE_BITS), layer.d, A2, counter)
    if geom is not None:
        out = FixedPointTensor(_rows_to_conv(out.mantissa, geom), out.exponent, out.step, WIDE_BITS)
    return out


def _lower_for_shift(model: PackedModel):
    """Fold a weight layer's bias into a directly following BN offset (``a*(x+c)+b``)."""
    layers = list(model.layers)
    for i in range(len(layers) - 1):
        layer, nxt = layers[i], layers[i + 1]
        if isinstance(layer, QuantLayer) and layer.bias is not None and isinstance(nxt, BNLayer):
            layers[i + 1] = BNLayer(nxt.a, nxt.b + nxt.a * layer.bias, nxt.pow2)
            layers[i] = QuantLayer(layer.kind, layer.d, layer.A, None, layer.stride, layer.padding,
                                   layer.constraint)
    return layers


def _run_shift(model, x, bn_mode, counter):
    layers = _lower_for_shift(model)
    first = layers[0] if layers else None
    if not isinstance(first, ActQuantLayer):
        raise ModeError("shift mode needs the model to start with an act_quant layer")
    if not isinstance(x, FixedPointTensor):
        # sensor-side conversion onto the input grid, outside the counted pass
        x = FixedPointTensor.quantize(x, first.bits, first.r)
    t = x
    for i, layer in enumerate(layers):
        counter.layer(i, _kind(layer))
        if isinstance(layer, QuantLayer):
            t = _shift_weight_layer(layer, t, counter)
            if layer.bias is not None:
                t = _add_offset(t, layer.bias, counter)
        elif isinstance(layer, BNLayer):
            t = _shift_bn(layer, t, bn_mode, counter)
        elif isinstance(layer, ReluLayer):
            t = FixedPointTensor(np.maximum(t.mantissa, 0), t.exponent, t.step, t.bits)
        elif isinstance(layer, ActQuantLayer):
            t = _shift_act_quant(layer, t, counter)
        elif isinstance(layer, FlattenLayer):
            t = FixedPointTensor(t.mantissa.reshape(t.mantissa.shape[0], -1), t.exponent, t.step, t.bits)
    return t


def _kind(layer) -> str:
    if isinstance(layer, (QuantLayer, DenseLayer)):
        return layer.kind
    return {BNLayer: "batchnorm", ReluLayer: "relu", ActQuantLayer: "act_quant",
            FlattenLayer: "flatten"}[type(layer)]


def check_mode(model: PackedModel, mode: str, bn_mode: str = "auto") -> str:
    """Validate ``mode`` against the model and resolve ``bn_mode`` ("shift" or "multiply")."""
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}; expected one of {MODES}")
    bns = [l for l in model.layers if isinstance(l, BNLayer)]
    if bn_mode == "auto":
        bn_mode = "shift" if mode == "shift" and all(l.pow2 for l in bns) else "multiply"
    if bn_mode not in ("shift", "multiply"):
        raise ModeError(f"unknown BN mode {bn_mode!r}")
    if mode in ("bucket", "shift"):
        for i, layer in model.weight_layers():
            if isinstance(layer, DenseLayer):
                raise ModeError(f"layer {i} is not quantized; {mode} mode needs a dictionary")
    if mode == "shift":
        for i, layer in model.weight_layers():
            if not np.all(is_pow2(layer.d[layer.d != 0])):
                raise ModeError(f"layer {i} dictionary is not power-of-two; use bucket mode")
    if bn_mode == "shift":
        if mode != "shift":
            raise ModeError("shift BN is only available in shift mode")
        for l in bns:
            if not np.all((l.a == 0) | is_pow2(l.a)):
                raise ModeError("BN scales are not powers of two; use bn_mode='multiply'")
    return bn_mode


def run_inference(model: PackedModel, x, mode: str = "dense", bn_mode: str = "auto"):
    """Evaluate ``model`` on a batch; returns ``(float outputs, OpCountReport)``.

    In shift mode a float input is first put on the input quantizer's grid; that
    conversion is treated as data preparation and is not counted. The integer
    result is dequantized for the caller outside the counted pass as well.
    """
    bn_mode = check_mode(model, mode, bn_mode)
    counter = OpCounter()
    samples = (x.mantissa if isinstance(x, FixedPointTensor) else np.asarray(x)).shape[0]
    if mode == "shift":
        out = _run_shift(model, x, bn_mode, counter).dequantize()
    else:
        out = _run_float(model, x, mode, counter)
        bn_mode = "multiply"
    return out, OpCountReport(mode, bn_mode, samples, counter.rows)


def predict(model: PackedModel, x, mode: str = "dense", bn_mode: str = "auto"):
    out, report = run_inference(model, x, mode, bn_mode)
    return np.argmax(out, axis=1), report
