"""Layer definitions and the :class:`Network` container that turns a layer list into graphs."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .numerics import quantize_uniform, smallest_pow2_at_least

KINDS = ("affine", "conv2d", "batchnorm", "relu", "act_quant", "flatten")
WEIGHT_KINDS = ("affine", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_features: int = 0  # affine outputs / conv output channels
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = True
    bits: int = 8  # act_quant only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in WEIGHT_KINDS and self.out_features < 1:
            raise ValueError(f"{self.kind} layer needs out_features >= 1")
        if self.kind == "conv2d" and (self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ValueError("conv2d needs kernel >= 1, stride >= 1, padding >= 0")
        if self.kind == "act_quant" and self.bits < 2:
            raise ValueError("act_quant bitwidth must be >= 2")


@dataclass(frozen=True)
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if np.any(self.var < 0):
            raise ValueError("running variance must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def identity(cls, channels: int, **kw) -> "BNState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), **kw)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class ActQuantSpec:
    bits: int = 8
    r: float = 1.0

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError("bitwidth must be >= 2")
        if not (self.r > 0 and np.frexp(self.r)[0] == 0.5):
            raise ValueError(f"activation range must be a positive power of two, got {self.r}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def step(self) -> float:
        return self.r / self.qmax


def affine_forward(x, W, bias):
    x, W, bias = (np.asarray(a, dtype=np.float64) for a in (x, W, bias))
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or bias.shape != (W.shape[0],):
        raise ShapeError(f"affine: x {x.shape}, W {W.shape}, bias {bias.shape} do not conform")
    return x @ W.T + bias


def conv2d_forward(x, W, bias, stride=1, padding=0):
    y, _ = ad._OPS["conv2d"][0]([np.asarray(x, float), np.asarray(W, float)],
                                {"stride": stride, "padding": padding})
    return y + np.asarray(bias, float).reshape(1, -1, 1, 1)


def batchnorm_train(x, state: BNState):
    """Normalize with batch statistics; returns ``(y, updated state)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ShapeError("batchnorm_train needs a batch of at least 2")
    y, cache = ad.bn_forward(x, state.gamma, state.beta, state.mean, state.var, state.eps, True, False)
    return y, update_running_stats(state, cache["mean"], cache["var"])


def update_running_stats(state: BNState, batch_mean, batch_var) -> BNState:
    m = state.momentum
    return replace(state, mean=(1 - m) * state.mean + m * batch_mean,
                   var=(1 - m) * state.var + m * batch_var)


def batchnorm_infer(x, state: BNState):
    y, _ = ad.bn_forward(np.asarray(x, dtype=np.float64), state.gamma, state.beta,
                         state.mean, state.var, state.eps, False, False)
    return y


def act_quant_forward(x, spec: ActQuantSpec):
    return quantize_uniform(x, spec.bits, spec.r)


def act_quant_backward(upstream, x, spec: ActQuantSpec):
    """Straight-through gradient, zeroed where the input was clipped."""
    return np.asarray(upstream, dtype=np.float64) * (np.abs(x) <= spec.r)


# ---------------------------------------------------------------------------


@dataclass
class Network:
    """A feed-forward stack of layers plus its trainable state.

    Parameters are named ``"<index>.W"``, ``"<index>.b"``, ``"<index>.gamma"``,
    ``"<index>.beta"``. Running BN statistics live in ``bn`` and activation
    ranges in ``act`` (both keyed by layer index).
    """

    specs: list[LayerSpec]
    input_shape: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    bn: dict[int, BNState] = field(default_factory=dict)
    act: dict[int, ActQuantSpec] = field(default_factory=dict)
    multiplierless_bn: bool = False

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self._graphs: dict = {}
        self.shapes = self._infer_shapes()

    @classmethod
    def build(cls, specs, input_shape, seed=0, multiplierless_bn=False) -> "Network":
        """Create a network with He-uniform weights drawn from ``seed``."""
        net = cls(list(specs), tuple(input_shape), multiplierless_bn=multiplierless_bn)
        rng = np.random.default_rng(seed)
        for i, spec in enumerate(net.specs):
            in_shape = net.shapes[i]
            if spec.kind == "affine":
                fan_in = in_shape[0]
                lim = np.sqrt(6.0 / fan_in)
                net.params[f"{i}.W"] = rng.uniform(-lim, lim, (spec.out_features, fan_in))
            elif spec.kind == "conv2d":
                c = in_shape[0]
                fan_in = c * spec.kernel ** 2
                lim = np.sqrt(6.0 / fan_in)
                net.params[f"{i}.W"] = rng.uniform(-lim, lim, (spec.out_features, c, spec.kernel, spec.kernel))
            if spec.kind in WEIGHT_KINDS and spec.bias:
                net.params[f"{i}.b"] = np.zeros(spec.out_features)
            if spec.kind == "batchnorm":
                st = BNState.identity(in_shape[0])
                net.bn[i] = st
                net.params[f"{i}.gamma"] = st.gamma.copy()
                net.params[f"{i}.beta"] = st.beta.copy()
            if spec.kind == "act_quant":
                net.act[i] = ActQuantSpec(spec.bits, 1.0)
        return net

    def _infer_shapes(self):
        shapes = [self.input_shape]
        cur = self.input_shape
        for i, spec in enumerate(self.specs):
            if spec.kind == "affine":
                if len(cur) != 1:
                    raise ShapeError(f"layer {i}: affine needs a flat input, got {cur} (add flatten)")
                cur = (spec.out_features,)
            elif spec.kind == "conv2d":
                if len(cur) != 3:
                    raise ShapeError(f"layer {i}: conv2d needs (C, H, W) input, got {cur}")
                oh = ad.conv_output_size(cur[1], spec.kernel, spec.stride, spec.padding)
                ow = ad.conv_output_size(cur[2], spec.kernel, spec.stride, spec.padding)
                if oh < 1 or ow < 1:
                    raise ShapeError(f"layer {i}: conv2d output extent is not positive")
                cur = (spec.out_features, oh, ow)
            elif spec.kind == "flatten":
                cur = (int(np.prod(cur)),)
            shapes.append(cur)
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    def bn_state(self, i: int) -> BNState:
        """BN layer ``i`` with its current trained gamma/beta and running statistics."""
        return replace(self.bn[i], gamma=self.params[f"{i}.gamma"], beta=self.params[f"{i}.beta"])

    def weight_names(self) -> list[str]:
        return [f"{i}.W" for i, s in enumerate(self.specs) if s.kind in WEIGHT_KINDS]

    def copy(self) -> "Network":
        other = copy.deepcopy(self)
        other._graphs = {}
        return other

    def __deepcopy__(self, memo):
        cls = self.__class__
        out = cls.__new__(cls)
        for k, v in self.__dict__.items():
            if k != "_graphs":
                setattr(out, k, copy.deepcopy(v, memo))
        out._graphs = {}
        return out

    def graph(self, training: bool, quantize_acts: bool = True):
        """Graph for ``(training, quantize_acts)``; cached and shared across calls.

        Inputs: ``x`` (batch + input_shape), ``labels``, and per-BN running stats
        ``"<i>.mean"`` / ``"<i>.var"``. Returns ``(graph, logits_id, loss_id)``.
        """
        key = (training, quantize_acts)
        if key not in self._graphs:
            g, logits = self._build(training, quantize_acts, len(self.specs))
            loss = g.softmax_cross_entropy(logits, g.input("labels", (None,)))
            self._graphs[key] = (g, logits, loss)
        return self._graphs[key]

    def _build(self, training, quantize_acts, upto):
        g = ad.Graph()
        h = g.input("x", (None,) + self.input_shape)
        for i, spec in enumerate(self.specs[:upto]):
            if spec.kind in WEIGHT_KINDS:
                w = g.parameter(f"{i}.W", self.params[f"{i}.W"])
                if spec.kind == "affine":
                    h = g.matmul(h, w, transpose_b=True)
                else:
                    h = g.conv2d(h, w, spec.stride, spec.padding)
                if spec.bias:
                    h = g.bias_add(h, g.parameter(f"{i}.b", self.params[f"{i}.b"]))
            elif spec.kind == "batchnorm":
                h = g.batchnorm(h, g.parameter(f"{i}.gamma", self.params[f"{i}.gamma"]),
                                g.parameter(f"{i}.beta", self.params[f"{i}.beta"]),
                                g.input(f"{i}.mean"), g.input(f"{i}.var"),
                                eps=self.bn[i].eps, training=training,
                                pow2=self.multiplierless_bn, name=f"{i}.bn")
            elif spec.kind == "relu":
                h = g.relu(h)
            elif spec.kind == "flatten":
                h = g.reshape(h, (int(np.prod(self.shapes[i])),))
            elif spec.kind == "act_quant" and quantize_acts:
                # range is baked into the node; invalidate() after recalibration
                h = g.act_quant(h, spec.bits, self.act[i].r, name=f"{i}.aq")
        return g, h

    def invalidate(self):
        """Drop cached graphs (activation ranges are baked into node attrs)."""
        self._graphs = {}

    def feeds(self, x, labels=None, overrides=None) -> dict:
        f = {"x": np.asarray(x, dtype=np.float64)}
        f["labels"] = np.zeros(f["x"].shape[0]) if labels is None else np.asarray(labels, dtype=np.float64)
        for i, st in self.bn.items():
            f[f"{i}.mean"] = st.mean
            f[f"{i}.var"] = st.var
        f.update(self.params)
        if overrides:
            f.update(overrides)
        return f

    def logits(self, x, overrides=None):
        g, logits, _ = self.graph(training=False)
        return ad.evaluate(g, self.feeds(x, overrides=overrides))[logits]

    def predict(self, x, overrides=None):
        return np.argmax(self.logits(x, overrides), axis=1)

    def activation_sizes(self) -> list[int]:
        """Element counts of the input and of every layer output, per sample."""
        return [int(np.prod(s)) for s in self.shapes]


def calibrate_act_range(network: Network, batch, overrides=None, training=True) -> dict[int, float]:
    """Set each act_quant range to the smallest power of two covering the observed activations.

    Ranges are calibrated front to back, so layer ``i`` sees activations produced
    with the already-calibrated quantizers in front of it. BN running statistics
    are not touched. All-zero activations give ``r = 1``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    ranges = {}
    for i in sorted(network.act):
        g, probe = network._build(training, True, i)
        val = ad.evaluate(g, network.feeds(batch, overrides=overrides))[probe]
        peak = float(np.max(np.abs(val))) if val.size else 0.0
        r = smallest_pow2_at_least(peak) if peak > 0 else 1.0
        network.act[i] = replace(network.act[i], r=r)
        ranges[i] = r
    network.invalidate()
    return ranges


def recalibrate(network: Network, batch, overrides=None) -> None:
    """Set BN running statistics and act_quant ranges from ``batch`` in inference mode.

    One front-to-back sweep: each BN layer gets the (biased) mean/variance of
    its input over the whole batch, each act_quant layer the smallest power of
    two covering its input, both computed with everything in front of it
    already recalibrated. Unlike the running averages this depends only on
    the parameters and the batch.
    """
    batch = np.asarray(batch, dtype=np.float64)
    for i, spec in enumerate(network.specs):
        if spec.kind not in ("batchnorm", "act_quant"):
            continue
        g, probe = network._build(False, True, i)
        val = ad.evaluate(g, network.feeds(batch, overrides=overrides))[probe]
        if spec.kind == "batchnorm":
            axes = tuple(a for a in range(val.ndim) if a != 1)
            network.bn[i] = replace(network.bn[i], mean=val.mean(axis=axes), var=val.var(axis=axes))
        else:
            peak = float(np.max(np.abs(val))) if val.size else 0.0
            network.act[i] = replace(network.act[i], r=smallest_pow2_at_least(peak))
    network.invalidate()
