"""Look-up table quantization of layer weights.

Each quantized layer keeps full-precision shadow weights ``W``, a dictionary
``d`` of ``K`` values and an assignment array ``A`` (1-based indices into
``d``, same shape as ``W``). The forward pass only ever sees the tied weights
``Q = d[A]``. After every minibatch the shadow weights take an SGD step using
``dC/dQ`` and the dictionary/assignments are refreshed by a few k-means
iterations, optionally under a dictionary constraint.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from .errors import ConstraintError
from .layers import Network, update_running_stats
from .numerics import is_pow2, pow2_round

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Unconstrained:
    pass


@dataclass(frozen=True)
class PowerOfTwo:
    pass


@dataclass(frozen=True)
class FixedSet:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConstraintError(f"fixed set must be non-empty and strictly increasing: {vals}")


@dataclass(frozen=True)
class PrunedZero:
    fraction: float
    inner: "Constraint" = Unconstrained()

    def __post_init__(self):
        if not 0 <= self.fraction < 1:
            raise ConstraintError(f"pruning fraction must lie in [0, 1), got {self.fraction}")
        if isinstance(self.inner, PrunedZero):
            raise ConstraintError("PrunedZero cannot be nested")


Constraint = Union[Unconstrained, PowerOfTwo, FixedSet, PrunedZero]

BINARY = FixedSet((-1.0, 1.0))
TERNARY = FixedSet((-1.0, 0.0, 1.0))


def constraint_name(c: Constraint) -> str:
    if isinstance(c, Unconstrained):
        return "unconstrained"
    if isinstance(c, PowerOfTwo):
        return "pow2"
    if isinstance(c, FixedSet):
        return "fixed:" + ",".join(repr(v) for v in c.values)
    return f"pruned:{c.fraction!r}:{constraint_name(c.inner)}"


@dataclass
class QuantizedLayerState:
    W: np.ndarray
    d: np.ndarray
    A: np.ndarray  # int64, entries in 1..K
    constraint: Constraint = Unconstrained()
    empty_clusters: int = 0  # running count of centroid updates that hit an empty cluster
    prune_mask: np.ndarray | None = None  # frozen zero set (PrunedZero); None = recomputed every update

    @property
    def K(self) -> int:
        return int(self.d.shape[0])

    @property
    def Q(self) -> np.ndarray:
        return tied_weights(self)


def tied_weights(state: QuantizedLayerState) -> np.ndarray:
    return state.d[state.A - 1]


def quantization_error(state: QuantizedLayerState) -> float:
    diff = state.W - tied_weights(state)
    return float(np.sum(diff * diff))


def sparsity(state: QuantizedLayerState) -> float:
    """Fraction of weights whose dictionary value is exactly zero."""
    if state.A.size == 0:
        return 0.0
    return float(np.mean(tied_weights(state) == 0.0))


def assign_step(W, d) -> np.ndarray:
    """Nearest dictionary entry per weight (1-based); ties go to the lowest index."""
    W = np.asarray(W, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if d.size < 1:
        raise ConstraintError("dictionary must have at least one entry")
    flat = W.reshape(-1)
    out = np.empty(flat.size, dtype=np.int64)
    chunk = max(1, (1 << 20) // d.size)
    for s in range(0, flat.size, chunk):
        dist = np.abs(flat[s:s + chunk, None] - d[None, :])
        out[s:s + chunk] = np.argmin(dist, axis=1)
    return out.reshape(W.shape) + 1


def _centroids(W, A, K, previous):
    flat_a = np.asarray(A).reshape(-1) - 1
    flat_w = np.asarray(W, dtype=np.float64).reshape(-1)
    counts = np.bincount(flat_a, minlength=K)[:K]
    sums = np.bincount(flat_a, weights=flat_w, minlength=K)[:K]
    d = np.array(previous, dtype=np.float64, copy=True)
    nonempty = counts > 0
    d[nonempty] = sums[nonempty] / counts[nonempty]
    return d, int(np.sum(~nonempty))


def centroid_step(W, A, K: int, previous_d) -> np.ndarray:
    """Mean of the weights assigned to each entry; an empty cluster keeps its previous value."""
    return _centroids(W, A, K, previous_d)[0]


def project_constraint(d, constraint: Constraint) -> np.ndarray:
    d = np.array(d, dtype=np.float64, copy=True)
    if isinstance(constraint, Unconstrained) or isinstance(constraint, FixedSet):
        return d
    if isinstance(constraint, PowerOfTwo):
        if np.any(d == 0):
            raise ConstraintError("zero dictionary value cannot be represented as a power of two "
                                  "without a pruning slot")
        return pow2_round(d)
    if isinstance(constraint, PrunedZero):
        if d.size:
            d[0] = 0.0
            d[1:] = project_constraint(d[1:], constraint.inner)
        return d
    raise TypeError(f"unknown constraint {constraint!r}")


def _pruned_count(fraction: float, n: int) -> int:
    return min(n, math.ceil(round(fraction * n, 9)))


def _prune_partition(W, fraction):
    """Indices (flat) of the ``fraction`` smallest-magnitude weights and of the rest."""
    flat = W.reshape(-1)
    order = np.argsort(np.abs(flat), kind="stable")
    n0 = _pruned_count(fraction, flat.size)
    return order[:n0], order[n0:]


def _lloyd_iteration(state: QuantizedLayerState) -> QuantizedLayerState:
    c, W, K = state.constraint, state.W, state.K
    if isinstance(c, FixedSet):
        return replace(state, A=assign_step(W, state.d))
    if isinstance(c, PrunedZero):
        A = np.ones(W.size, dtype=np.int64)
        d = state.d.copy()
        empty = 0
        if state.prune_mask is not None:
            keep = np.flatnonzero(~state.prune_mask.reshape(-1))
        else:
            _, keep = _prune_partition(W, c.fraction)
        if K > 1 and keep.size:
            w_keep = W.reshape(-1)[keep]
            a_keep = assign_step(w_keep, d[1:])
            A[keep] = a_keep + 1
            if not isinstance(c.inner, FixedSet):
                d[1:], empty = _centroids(w_keep, a_keep, K - 1, d[1:])
        d = project_constraint(d, c)
        return replace(state, d=d, A=A.reshape(W.shape), empty_clusters=state.empty_clusters + empty)
    A = assign_step(W, state.d)
    d, empty = _centroids(W, A, K, state.d)
    d = project_constraint(d, c)
    return replace(state, d=d, A=A, empty_clusters=state.empty_clusters + empty)


def freeze_pruning(state: QuantizedLayerState) -> QuantizedLayerState:
    """Fix the current zero set of a pruned layer; later updates keep exactly these weights at 0."""
    if not isinstance(state.constraint, PrunedZero):
        return state
    return replace(state, prune_mask=(state.A == 1).copy())


def kmeans_update(state: QuantizedLayerState, iterations: int = 1,
                  on_iteration: Callable[[int, float], None] | None = None,
                  stop_at_fixed_point: bool = False) -> QuantizedLayerState:
    """Run ``iterations`` rounds of assign / centroid / project on ``state``.

    ``on_iteration(m, error)`` is called after each round with the quantization
    error ``sum((W - Q)^2)``.
    """
    if iterations < 1:
        raise ValueError("k-means needs at least one iteration")
    before = state.empty_clusters
    for m in range(iterations):
        new = _lloyd_iteration(state)
        if on_iteration is not None:
            on_iteration(m, quantization_error(new))
        done = stop_at_fixed_point and np.array_equal(new.A, state.A) and np.array_equal(new.d, state.d)
        state = new
        if done:
            break
    if state.empty_clusters > before:
        logger.debug("k-means: %d empty cluster updates", state.empty_clusters - before)
    return state


def _quantile_init(values, k):
    if k <= 0:
        return np.zeros(0)
    if values.size == 0:
        return np.ones(k)
    return np.quantile(values, (np.arange(k) + 0.5) / k, method="inverted_cdf")


def _nonzero_pow2_seed(d, values):
    """Replace exact zeros so a power-of-two projection is defined."""
    nz = np.abs(values[values != 0])
    fill = float(np.min(nz)) if nz.size else 1.0
    return np.where(d == 0, fill, d)


def init_quantized_layer(W, K: int, constraint: Constraint = Unconstrained(),
                         iterations: int = 20) -> QuantizedLayerState:
    """Quantile-initialized dictionary refined by k-means until a fixed point (at most ``iterations``)."""
    W = np.array(W, dtype=np.float64, copy=True)
    if K < 1:
        raise ConstraintError(f"dictionary size must be >= 1, got {K}")
    flat = W.reshape(-1)
    if isinstance(constraint, FixedSet):
        if len(constraint.values) != K:
            raise ConstraintError(f"fixed set has {len(constraint.values)} values but K={K}")
        d = np.array(constraint.values)
        return QuantizedLayerState(W, d, assign_step(W, d), constraint)
    if isinstance(constraint, PrunedZero):
        inner = constraint.inner
        if isinstance(inner, FixedSet):
            if len(inner.values) != K - 1:
                raise ConstraintError(f"pruned fixed set needs K-1={K - 1} values, got {len(inner.values)}")
            rest = np.array(inner.values)
        else:
            _, keep = _prune_partition(W, constraint.fraction)
            pool = flat[keep] if keep.size else flat
            rest = _quantile_init(pool, K - 1)
            if isinstance(inner, PowerOfTwo):
                rest = _nonzero_pow2_seed(rest, pool)
        d = project_constraint(np.concatenate([[0.0], rest]), constraint)
    else:
        if isinstance(constraint, Unconstrained):
            distinct = np.unique(flat).size
            if K > distinct:
                warnings.warn(f"K={K} exceeds the {distinct} distinct weight values; using K={distinct}",
                              stacklevel=2)
                K = distinct
        d = _quantile_init(flat, K)
        if isinstance(constraint, PowerOfTwo):
            d = _nonzero_pow2_seed(d, flat)
        d = project_constraint(d, constraint)
    state = QuantizedLayerState(W, d, assign_step(W, d), constraint)
    return kmeans_update(state, iterations, stop_at_fixed_point=True)


def check_invariants(state: QuantizedLayerState) -> None:
    """Raise :class:`ConstraintError` if ``state`` violates its constraint."""
    K = state.K
    if state.A.shape != state.W.shape:
        raise ConstraintError("assignment shape differs from weight shape")
    if state.A.size and (state.A.min() < 1 or state.A.max() > K):
        raise ConstraintError("assignment index out of range")
    if not np.all(np.isfinite(state.d)):
        raise ConstraintError("dictionary is not finite")
    _check_dictionary(state.d, state.constraint)
    c = state.constraint
    if isinstance(c, PrunedZero):
        share = float(np.mean(state.A == 1)) if state.A.size else 1.0
        if share < c.fraction:
            raise ConstraintError(f"pruned share {share} below required {c.fraction}")


def _check_dictionary(d, c):
    if isinstance(c, PowerOfTwo):
        if not np.all(is_pow2(d)):
            raise ConstraintError(f"dictionary has non power-of-two values: {d}")
    elif isinstance(c, FixedSet):
        if not np.array_equal(d, np.array(c.values)):
            raise ConstraintError("fixed-set dictionary was modified")
    elif isinstance(c, PrunedZero):
        if d.size == 0 or d[0] != 0.0:
            raise ConstraintError("pruned dictionary must start with 0")
        _check_dictionary(d[1:], c.inner)


# ---------------------------------------------------------------------------
# training


@dataclass
class LayerPlan:
    K: int
    constraint: Constraint = Unconstrained()


@dataclass
class LutqModel:
    """A network whose weight layers listed in ``states`` are trained with LUT-Q.

    An empty ``states`` mapping makes :func:`lutq_train_step` plain SGD.
    """

    network: Network
    states: dict[str, QuantizedLayerState] = field(default_factory=dict)
    iterations: int = 1

    @classmethod
    def from_network(cls, network: Network, plan: dict[str, LayerPlan], iterations: int = 1,
                     init_iterations: int = 20) -> "LutqModel":
        states = {}
        for name, lp in plan.items():
            if name not in network.params:
                raise ConstraintError(f"quantization plan names unknown layer {name!r}")
            states[name] = init_quantized_layer(network.params[name], lp.K, lp.constraint, init_iterations)
        return cls(network, states, iterations)

    def tied(self) -> dict[str, np.ndarray]:
        return {name: tied_weights(st) for name, st in self.states.items()}

    def logits(self, x):
        return self.network.logits(x, overrides=self.tied())

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)


@dataclass
class StepInfo:
    loss: float
    grads: dict[str, np.ndarray]


def lutq_train_step(model: LutqModel, x, labels, lr: float, iterations: int | None = None,
                    on_kmeans: Callable[[str, int, float], None] | None = None) -> StepInfo:
    """One minibatch of LUT-Q training; mutates ``model`` in place.

    1. tie weights ``Q = d[A]`` for every quantized layer
    2. forward/backward with ``Q`` substituted for ``W``
    3. SGD on the shadow weights with ``dC/dQ`` (other parameters get plain SGD)
    4. ``iterations`` k-means rounds per quantized layer
    """
    net = model.network
    M = model.iterations if iterations is None else iterations
    tied = model.tied()
    graph, _, loss_id = net.graph(training=True)
    trace = ad.evaluate(graph, net.feeds(x, labels, overrides=tied))
    grads = ad.backprop(trace, loss_id)
    for i in net.bn:
        cache = trace.caches[graph.names[f"{i}.bn"]]
        net.bn[i] = update_running_stats(net.bn[i], cache["mean"], cache["var"])
    net.params = ad.sgd_update(net.params, grads, lr)
    for name, st in model.states.items():
        hook = None if on_kmeans is None else (lambda m, err, _n=name: on_kmeans(_n, m, err))
        model.states[name] = kmeans_update(replace(st, W=net.params[name]), M, on_iteration=hook)
    return StepInfo(float(trace[loss_id]), grads)
