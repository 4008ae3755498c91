"""In-memory form of a deployable model: an ordered list of layer records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import LutqModel, constraint_name
from ..layers import Network, WEIGHT_KINDS
from ..mlbn import fold_bn, fold_bn_pow2
from ..autodiff import conv_output_size

B_FLOAT = 32


def index_bits(K: int) -> int:
    """``ceil(log2 K)``; zero for a single-entry dictionary."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return (K - 1).bit_length()


@dataclass
class QuantLayer:
    """Affine (``W`` is ``O x I``) or conv2d (``O x C x kh x kw``) layer stored as dictionary + assignments."""

    kind: str
    d: np.ndarray
    A: np.ndarray  # 1-based, shape of W
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    constraint: str = "unconstrained"

    @property
    def K(self) -> int:
        return int(self.d.size)

    @property
    def N(self) -> int:
        return int(self.A.size)

    @property
    def shape(self):
        return self.A.shape

    def weights(self) -> np.ndarray:
        return self.d[self.A - 1]

    def payload_bits(self) -> int:
        return self.K * B_FLOAT + self.N * index_bits(self.K)


@dataclass
class DenseLayer:
    kind: str
    W: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    @property
    def N(self) -> int:
        return int(self.W.size)

    @property
    def shape(self):
        return self.W.shape

    def weights(self) -> np.ndarray:
        return self.W

    def payload_bits(self) -> int:
        return self.N * B_FLOAT


@dataclass
class BNLayer:
    """Folded BN ``y = a*x + b``; with ``pow2`` every ``a`` is 0 or a signed power of two."""

    a: np.ndarray
    b: np.ndarray
    pow2: bool = False

    @property
    def channels(self) -> int:
        return int(self.a.size)


@dataclass
class ReluLayer:
    pass


@dataclass
class ActQuantLayer:
    bits: int
    r: float

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def step(self) -> float:
        return self.r / self.qmax


@dataclass
class FlattenLayer:
    pass


@dataclass
class PackedModel:
    input_shape: tuple
    layers: list = field(default_factory=list)

    def weight_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, (QuantLayer, DenseLayer))]

    def shapes(self) -> list[tuple]:
        """Per-sample shapes of the input and of every layer output."""
        cur = tuple(self.input_shape)
        out = [cur]
        for layer in self.layers:
            if isinstance(layer, (QuantLayer, DenseLayer)):
                if layer.kind == "affine":
                    cur = (layer.shape[0],)
                else:
                    o, _, kh, kw = layer.shape
                    cur = (o, conv_output_size(cur[1], kh, layer.stride, layer.padding),
                           conv_output_size(cur[2], kw, layer.stride, layer.padding))
            elif isinstance(layer, FlattenLayer):
                cur = (int(np.prod(cur)),)
            out.append(cur)
        return out


def _float32_exact(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def pack_model(source: Network | LutqModel) -> PackedModel:
    """Freeze a (possibly LUT-Q) network into inference records.

    Dictionary values are stored at 32-bit precision; BN is folded with the
    running statistics (to power-of-two scales when the network was trained
    with multiplier-less BN).
    """
    if isinstance(source, LutqModel):
        net, states = source.network, source.states
    else:
        net, states = source, {}
    layers = []
    for i, spec in enumerate(net.specs):
        if spec.kind in WEIGHT_KINDS:
            name = f"{i}.W"
            bias = net.params[f"{i}.b"].copy() if spec.bias else None
            if name in states:
                st = states[name]
                layers.append(QuantLayer(spec.kind, _float32_exact(st.d), st.A.copy(), bias,
                                         spec.stride, spec.padding, constraint_name(st.constraint)))
            else:
                layers.append(DenseLayer(spec.kind, net.params[name].copy(), bias, spec.stride, spec.padding))
        elif spec.kind == "batchnorm":
            state = net.bn_state(i)
            if net.multiplierless_bn:
                folded = fold_bn_pow2(state)
                layers.append(BNLayer(folded.a_hat, folded.b, pow2=True))
            else:
                a, b = fold_bn(state)
                layers.append(BNLayer(a, b))
        elif spec.kind == "relu":
            layers.append(ReluLayer())
        elif spec.kind == "act_quant":
            layers.append(ActQuantLayer(net.act[i].bits, net.act[i].r))
        elif spec.kind == "flatten":
            layers.append(FlattenLayer())
    return PackedModel(tuple(net.input_shape), layers)
