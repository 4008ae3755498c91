"""Multiplier-less batch normalization.

At inference BN reduces to ``y = a*x + b``. Replacing ``a`` by the nearest
power of two ``a_hat`` turns the scale into a shift. Training keeps a full
precision ``gamma`` and runs the forward pass with the effective scale
``gamma_hat = a_hat * sqrt(var + eps)``, i.e. the value for which
``gamma_hat / sqrt(var + eps) == a_hat``. Gradients reach ``gamma``
straight through the power-of-two projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .layers import BNState
from .numerics import pow2_exponent, pow2_round


@dataclass(frozen=True)
class FoldedBN:
    a: np.ndarray
    b: np.ndarray
    a_hat: np.ndarray | None = None
    exponents: np.ndarray | None = None  # meaningful where a_hat != 0

    @property
    def signs(self) -> np.ndarray:
        return np.sign(self.a_hat).astype(np.int8)


def fold_bn(state: BNState):
    """Scale and offset of inference-time BN: ``a = gamma/sqrt(var+eps)``, ``b = beta - a*mean``."""
    std = np.sqrt(state.var + state.eps)
    a = state.gamma / std
    b = state.beta - state.gamma * state.mean / std
    return a, b


def quantize_scale_pow2(a):
    """``sign(a) * 2^round(log2|a|)``; zero scales stay zero (the channel passes only its offset)."""
    return pow2_round(a)


def fold_bn_pow2(state: BNState) -> FoldedBN:
    """Fold with a power-of-two scale; the offset uses the quantized scale, ``b = beta - a_hat*mean``."""
    a, _ = fold_bn(state)
    a_hat = quantize_scale_pow2(a)
    b = state.beta - a_hat * state.mean
    return FoldedBN(a=a, b=b, a_hat=a_hat, exponents=pow2_exponent(a_hat))


def mlbn_forward_train(x, state: BNState):
    """Training forward with batch statistics and the power-of-two effective scale."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ShapeError("mlbn_forward_train needs a batch of at least 2")
    return ad.bn_forward(x, state.gamma, state.beta, state.mean, state.var, state.eps,
                         training=True, pow2=True)


def mlbn_backward(cache, upstream):
    """Gradients ``(dx, dgamma, dbeta)``; dgamma is the gradient w.r.t. ``gamma_hat`` applied to ``gamma``."""
    return ad.bn_backward(np.asarray(upstream, dtype=np.float64), cache, training=True)


def mlbn_infer(x, folded: FoldedBN):
    """``a_hat * x + b`` per channel (channel axis 1), the scale applied as an exponent shift."""
    x = np.asarray(x, dtype=np.float64)
    if folded.a_hat is None:
        raise ValueError("folded BN has no power-of-two scale")
    cs = (1, -1) + (1,) * (x.ndim - 2)
    shifted = np.ldexp(x, pow2_exponent(folded.a_hat).reshape(cs))
    shifted = np.where(folded.a_hat.reshape(cs) < 0, -shifted, shifted)
    shifted = np.where(folded.a_hat.reshape(cs) == 0, 0.0, shifted)
    return shifted + folded.b.reshape(cs)
