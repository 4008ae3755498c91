import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lutq import autodiff as ad
from lutq.core import (BINARY, TERNARY, FixedSet, LayerPlan, LutqModel, PowerOfTwo, PrunedZero,
                       QuantizedLayerState, Unconstrained, assign_step, centroid_step, check_invariants,
                       constraint_name, freeze_pruning, init_quantized_layer, kmeans_update,
                       lutq_train_step, project_constraint, quantization_error, sparsity, tied_weights)
from lutq.errors import ConstraintError
from lutq.layers import LayerSpec, Network
from oracles import lloyd_bruteforce, nearest_index, partition_error


def _state(W, d, A, c=Unconstrained()):
    return QuantizedLayerState(np.asarray(W, float), np.asarray(d, float), np.asarray(A), c)


def test_tied_weight_examples():
    assert np.array_equal(tied_weights(_state(np.zeros((2, 2)), [-1, 1], [[1, 2], [2, 1]])), [[-1, 1], [1, -1]])
    assert np.array_equal(tied_weights(_state(np.zeros((2, 3)), [0.7], np.ones((2, 3), int))), np.full((2, 3), 0.7))
    assert np.array_equal(tied_weights(_state(np.zeros((1, 3)), [0, 0.5, 2], [[3, 1, 2]])), [[2, 0, 0.5]])


def test_assign_examples():
    assert list(assign_step(np.array([0.9, -1.1, 0.1]), np.array([-1.0, 0.0, 1.0]))) == [3, 1, 2]
    assert list(assign_step(np.array([0.5]), np.array([0.0, 1.0]))) == [1]
    assert np.all(assign_step(np.array([[3.0, -2.0]]), np.array([0.1])) == 1)


@given(st.lists(st.floats(-4, 4), min_size=1, max_size=12), st.lists(st.floats(-4, 4), min_size=1, max_size=5))
def test_assign_matches_exhaustive_search(ws, ds):
    got = assign_step(np.array(ws), np.array(ds))
    assert list(got) == [nearest_index(w, ds) for w in ws]


def test_centroid_examples():
    W = np.array([1.0, 2.0, 3.0, 10.0])
    assert list(centroid_step(W, np.array([1, 1, 1, 2]), 2, np.zeros(2))) == [2.0, 10.0]
    assert list(centroid_step(np.full(4, 1.5), np.array([1, 2, 1, 2]), 2, np.zeros(2))) == [1.5, 1.5]
    assert list(centroid_step(W, np.ones(4, int), 2, np.array([0.0, 7.0]))) == [4.0, 7.0]


def test_project_examples():
    assert list(project_constraint([0.3], PowerOfTwo())) == [0.25]
    assert list(project_constraint([1.0, -2.0], PowerOfTwo())) == [1.0, -2.0]
    assert list(project_constraint([0.1, 0.7], PrunedZero(0.5, PowerOfTwo()))) == [0.0, 0.5]
    assert list(project_constraint([0.3, 0.2], Unconstrained())) == [0.3, 0.2]
    with pytest.raises(ConstraintError):
        project_constraint([0.0, 1.0], PowerOfTwo())


CONSTRAINTS = [Unconstrained(), PowerOfTwo(), BINARY, TERNARY, PrunedZero(0.5), PrunedZero(0.3, PowerOfTwo())]


@pytest.mark.parametrize("c", CONSTRAINTS, ids=constraint_name)
@given(vals=st.lists(st.floats(0.01, 8) | st.floats(-8, -0.01), min_size=3, max_size=3))
def test_project_is_idempotent(c, vals):
    d = np.array(vals) if not isinstance(c, FixedSet) else np.array(c.values)
    once = project_constraint(d, c)
    assert np.array_equal(project_constraint(once, c), once)


def test_kmeans_worked_example():
    st_ = _state([1.0, 2.0, 3.0, 10.0], [1.0, 10.0], [1, 1, 1, 2])
    out = kmeans_update(st_, 2)
    assert list(out.d) == [2.0, 10.0] and list(out.A) == [1, 1, 1, 2]
    # brute force over all 2-partitions agrees that this is the optimum
    assert partition_error(out.W, out.A, 2) == pytest.approx(lloyd_bruteforce(out.W, 2))


def test_kmeans_fixed_set_assigns_only():
    out = kmeans_update(_state([0.2, -3.0], BINARY.values, [1, 1], BINARY), 1)
    assert list(out.A) == [2, 1] and list(out.d) == [-1.0, 1.0]


def test_kmeans_iteration_count():
    st_ = _state([0.1, 0.5, 0.9], [0.0, 1.0], [1, 1, 2])
    with pytest.raises(ValueError):
        kmeans_update(st_, 0)
    A = assign_step(st_.W, st_.d)
    d = project_constraint(centroid_step(st_.W, A, 2, st_.d), Unconstrained())
    one = kmeans_update(st_, 1)
    assert np.array_equal(one.A, A) and np.array_equal(one.d, d)


def test_empty_cluster_keeps_value_and_is_counted():
    out = kmeans_update(_state([0.0, 0.1], [0.05, 5.0], [1, 1]), 1)
    assert out.d[1] == 5.0 and out.empty_clusters == 1


def test_init_uniform_k2():
    W = np.linspace(-1, 1, 2001)
    st_ = init_quantized_layer(W, 2)
    assert np.allclose(st_.d, [-0.5, 0.5], atol=2e-3)


def test_init_fixed_set_and_single_entry(rng):
    W = rng.normal(size=(4, 5))
    st_ = init_quantized_layer(W, 3, TERNARY)
    assert list(st_.d) == [-1.0, 0.0, 1.0]
    assert np.array_equal(st_.A, assign_step(W, st_.d))
    one = init_quantized_layer(W, 1)
    assert one.d[0] == pytest.approx(W.mean(), abs=1e-15) and np.all(one.A == 1)


def test_init_reduces_k_with_warning():
    W = np.array([1.0, 1.0, 2.0, 2.0])
    with pytest.warns(UserWarning, match="distinct"):
        st_ = init_quantized_layer(W, 4)
    assert st_.K == 2 and quantization_error(st_) == 0.0


def test_init_rejects_bad_k(rng):
    with pytest.raises(ConstraintError):
        init_quantized_layer(rng.normal(size=4), 0)
    with pytest.raises(ConstraintError):
        init_quantized_layer(rng.normal(size=4), 3, BINARY)


def test_init_is_deterministic(rng):
    W = rng.normal(size=(6, 7))
    a, b = init_quantized_layer(W, 4, PowerOfTwo()), init_quantized_layer(W, 4, PowerOfTwo())
    assert np.array_equal(a.d, b.d) and np.array_equal(a.A, b.A)


def test_init_k_equal_distinct_is_exact(rng):
    W = rng.normal(size=(5, 6))
    st_ = init_quantized_layer(W, W.size)
    assert np.array_equal(tied_weights(st_), W)


def test_lloyd_monotone_on_random_instances():
    r = np.random.default_rng(7)
    for _ in range(150):
        n, K = int(r.integers(2, 40)), int(r.integers(1, 6))
        W = r.normal(size=n) * r.uniform(0.1, 5)
        d = np.sort(r.choice(W, size=min(K, n), replace=False)) + r.normal(size=min(K, n)) * 0.1
        st_ = _state(W, d, assign_step(W, d))
        errs = [quantization_error(st_)]
        kmeans_update(st_, 10, on_iteration=lambda m, e: errs.append(e))
        assert all(b <= a + 1e-12 * max(1.0, a) for a, b in zip(errs, errs[1:]))


def test_fixed_point_matches_bruteforce_oracle():
    r = np.random.default_rng(11)
    for _ in range(100):
        n, K = int(r.integers(1, 9)), int(r.integers(1, 4))
        W = np.round(r.normal(size=n), 3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            st_ = init_quantized_layer(W, K, iterations=200)
        again = kmeans_update(st_, 1)
        assert np.array_equal(again.A, st_.A)  # fixed point: reassignment changes nothing
        assert quantization_error(st_) == pytest.approx(partition_error(W, st_.A, st_.K), abs=1e-12)
        assert quantization_error(st_) >= lloyd_bruteforce(W, st_.K) - 1e-12


def test_pruned_sparsity_at_least_fraction(rng):
    W = rng.normal(size=(20, 30))
    st_ = init_quantized_layer(W, 4, PrunedZero(0.7))
    st_ = kmeans_update(st_, 3)
    assert sparsity(st_) >= 0.7 and st_.d[0] == 0.0
    check_invariants(st_)


def test_pruning_removes_smallest_magnitudes(rng):
    W = rng.normal(size=100)
    st_ = init_quantized_layer(W, 3, PrunedZero(0.3))
    pruned = np.abs(W[st_.A == 1])
    kept = np.abs(W[st_.A != 1])
    assert pruned.size == 30 and pruned.max() <= kept.min()


def test_sparsity_examples():
    assert sparsity(_state([1.0, 2.0], [0.5, 1.5], [1, 2])) == 0.0
    assert sparsity(_state([0.01, -0.02], [0.0, 1.0], [1, 1], PrunedZero(0.5))) == 1.0


def test_freeze_pruning_keeps_mask(rng):
    W = rng.normal(size=50)
    st_ = freeze_pruning(init_quantized_layer(W, 3, PrunedZero(0.5)))
    mask = st_.A == 1
    moved = kmeans_update(QuantizedLayerState(W * rng.uniform(0.1, 3, 50), st_.d, st_.A, st_.constraint,
                                              prune_mask=st_.prune_mask), 2)
    assert np.array_equal(moved.A == 1, mask)


def test_check_invariants_detects_violations():
    with pytest.raises(ConstraintError):
        check_invariants(_state([1.0], [0.3], [1], PowerOfTwo()))
    with pytest.raises(ConstraintError):
        check_invariants(_state([1.0], [-1.0, 2.0], [1], BINARY))
    with pytest.raises(ConstraintError):
        check_invariants(_state([1.0, 2.0], [0.5, 1.0], [1, 2], PrunedZero(0.5)))
    with pytest.raises(ConstraintError):
        check_invariants(_state([1.0], [1.0], [2]))


def test_constraint_validation():
    with pytest.raises(ConstraintError):
        PrunedZero(1.0)
    with pytest.raises(ConstraintError):
        FixedSet((1.0, 0.0))
    with pytest.raises(ConstraintError):
        PrunedZero(0.5, PrunedZero(0.2))


# ---------------------------------------------------------------------------
# training step


def _tiny_net(seed=0, act=False):
    specs = [LayerSpec("affine", 6), LayerSpec("relu"), LayerSpec("affine", 3)]
    if act:
        specs = [LayerSpec("act_quant")] + specs[:2] + [LayerSpec("act_quant"), specs[2]]
    return Network.build(specs, (4,), seed=seed)


def test_hand_traced_scalar_step():
    net = Network.build([LayerSpec("affine", 2, bias=False)], (1,))
    net.params["0.W"] = np.array([[0.3], [-0.2]])
    model = LutqModel.from_network(net, {"0.W": LayerPlan(2)})
    assert list(model.states["0.W"].d) == [-0.2, 0.3]
    lutq_train_step(model, np.array([[1.0]]), np.array([0]), lr=1.0)
    p0 = 1.0 / (1.0 + math.exp(-0.5))
    w_new = np.array([[0.3 + (1 - p0)], [-0.2 - (1 - p0)]])
    assert np.allclose(net.params["0.W"], w_new, atol=1e-15)
    st_ = model.states["0.W"]
    assert np.allclose(st_.d, [w_new[1, 0], w_new[0, 0]], atol=1e-15) and st_.A.tolist() == [[2], [1]]


def test_gradient_routed_through_q(rng):
    net = _tiny_net(1)
    model = LutqModel.from_network(net, {n: LayerPlan(3) for n in net.weight_names()})
    x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
    W_before = {n: net.params[n].copy() for n in net.weight_names()}
    g, _, loss = net.graph(training=True)
    G = ad.backprop(ad.evaluate(g, net.feeds(x, y, overrides=model.tied())), loss)
    lutq_train_step(model, x, y, lr=0.05)
    for n in net.weight_names():
        assert np.allclose(net.params[n] - W_before[n], -0.05 * G[n], rtol=0, atol=1e-15)


def test_zero_lr_at_fixed_point_is_noop(rng):
    net = _tiny_net(2)
    model = LutqModel.from_network(net, {n: LayerPlan(3) for n in net.weight_names()}, init_iterations=500)
    before = {n: (s.W.copy(), s.d.copy(), s.A.copy()) for n, s in model.states.items()}
    lutq_train_step(model, rng.normal(size=(5, 4)), rng.integers(0, 3, 5), lr=0.0)
    for n, (W, d, A) in before.items():
        s = model.states[n]
        assert np.array_equal(s.W, W) and np.array_equal(s.d, d) and np.array_equal(s.A, A)


def test_k_equal_n_matches_full_precision_sgd(rng):
    # steps stay far below half the gap between weights, so no two weights share a centroid
    a, b = _tiny_net(3, act=True), _tiny_net(3, act=True)
    lut = LutqModel.from_network(a, {n: LayerPlan(a.params[n].size) for n in a.weight_names()})
    ref = LutqModel(b)
    for _ in range(20):
        x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
        lutq_train_step(lut, x, y, 1e-4)
        lutq_train_step(ref, x, y, 1e-4)
        for n in a.weight_names():
            assert np.array_equal(tied_weights(lut.states[n]), a.params[n])
    for n in a.params:
        assert np.max(np.abs(a.params[n] - b.params[n])) <= 1e-9


@pytest.mark.parametrize("c,K", [(Unconstrained(), 4), (PowerOfTwo(), 4), (BINARY, 2), (TERNARY, 3),
                                 (PrunedZero(0.6, PowerOfTwo()), 4), (PrunedZero(0.4, TERNARY), 4)],
                         ids=lambda v: constraint_name(v) if not isinstance(v, int) else str(v))
def test_train_steps_preserve_invariants(rng, c, K):
    if isinstance(c, PrunedZero) and isinstance(c.inner, FixedSet):
        c = PrunedZero(c.fraction, FixedSet((-1.0, 0.5, 1.0)))
    net = _tiny_net(4)
    model = LutqModel.from_network(net, {n: LayerPlan(K, c) for n in net.weight_names()})
    fixed = {n: s.d.copy() for n, s in model.states.items()}
    for _ in range(30):
        lutq_train_step(model, rng.normal(size=(6, 4)), rng.integers(0, 3, 6), 0.1)
        for n, s in model.states.items():
            check_invariants(s)
            if isinstance(c, FixedSet):
                assert np.array_equal(s.d, fixed[n])


def test_kmeans_hook_reports_errors(rng):
    net = _tiny_net(5)
    model = LutqModel.from_network(net, {n: LayerPlan(4) for n in net.weight_names()})
    seen = []
    lutq_train_step(model, rng.normal(size=(6, 4)), rng.integers(0, 3, 6), 0.1, iterations=3,
                    on_kmeans=lambda name, m, err: seen.append((name, m, err)))
    assert [(n, m) for n, m, _ in seen] == [(n, m) for n in net.weight_names() for m in range(3)]
    for n in net.weight_names():
        errs = [e for name, _, e in seen if name == n]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_plan_with_unknown_layer_rejected():
    with pytest.raises(ConstraintError):
        LutqModel.from_network(_tiny_net(), {"7.W": LayerPlan(2)})
