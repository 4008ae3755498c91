import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lutq.core import LayerPlan, LutqModel, PowerOfTwo
from lutq.errors import FormatError
from lutq.inference.engine import run_inference
from lutq.inference.fileformat import (MAGIC, deserialize, load, pack_assignments, read_layout, save,
                                       serialize, unpack_assignments)
from lutq.inference.model import DenseLayer, PackedModel, QuantLayer, index_bits, pack_model
from lutq.layers import LayerSpec, Network
from builders import random_input, random_pow2_model
from oracles import pack_bits_oracle


@pytest.mark.parametrize("K,bits", [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (16, 4), (17, 5), (256, 8)])
def test_index_bits(K, bits):
    assert index_bits(K) == bits


@given(st.integers(1, 300), st.integers(0, 200), st.integers(0, 2 ** 31))
def test_pack_matches_bit_oracle_and_round_trips(K, n, seed):
    A = np.random.default_rng(seed).integers(1, K + 1, size=n)
    data = pack_assignments(A, K)
    assert data == pack_bits_oracle(A, K)
    assert np.array_equal(unpack_assignments(data, K, n), A)


def test_pack_bit_order_example():
    # indices 1, 2, 3 at 2 bits, LSB first: 10 01 11 -> byte 0b00111001
    assert pack_assignments(np.array([2, 3, 4]), 4) == bytes([0b00111001])


def _models():
    r = np.random.default_rng(0)
    net = Network.build([LayerSpec("conv2d", 3, 3, 1, 1), LayerSpec("batchnorm"), LayerSpec("relu"),
                         LayerSpec("act_quant"), LayerSpec("flatten"), LayerSpec("affine", 5),
                         LayerSpec("affine", 2, bias=False)], (1, 4, 4), seed=0, multiplierless_bn=True)
    lut = LutqModel.from_network(net, {"0.W": LayerPlan(4, PowerOfTwo()), "5.W": LayerPlan(3)})
    return [pack_model(lut), pack_model(net), random_pow2_model(r, conv=False), random_pow2_model(r, conv=True)]


@pytest.mark.parametrize("model", _models())
def test_round_trip_is_bit_exact(model, tmp_path):
    path = tmp_path / "m.lutq"
    save(model, path)
    back = load(path)
    assert serialize(back) == path.read_bytes()
    assert back.input_shape == model.input_shape and len(back.layers) == len(model.layers)
    for a, b in zip(model.layers, back.layers):
        assert type(a) is type(b)
        for k, v in vars(a).items():
            if isinstance(v, np.ndarray):
                assert np.array_equal(v, getattr(b, k))
            else:
                assert v == getattr(b, k)
    x = np.random.default_rng(1).normal(size=(3,) + tuple(model.input_shape))
    assert np.array_equal(run_inference(model, x)[0], run_inference(back, x)[0])


@pytest.mark.parametrize("K,N", [(1, 7), (2, 7), (4, 1000), (16, 1000), (256, 65536), (3, 5)])
def test_payload_matches_storage_formula(K, N):
    r = np.random.default_rng(K)
    layer = QuantLayer("affine", r.normal(size=K).astype(np.float32).astype(float), r.integers(1, K + 1, size=(1, N)))
    layout = read_layout(serialize(PackedModel((N,), [layer])))[0]
    assert layout["payload_bits"] == K * 32 + N * index_bits(K)
    assert layout["padding_bits"] < 8 and (layout["assignment_bits"] + layout["padding_bits"]) % 8 == 0


def test_single_entry_dictionary_has_no_assignment_bytes():
    layer = QuantLayer("affine", np.array([0.5]), np.ones((3, 4), int))
    layout = read_layout(serialize(PackedModel((4,), [layer])))[0]
    assert layout["assignment_bytes"] == 0 and layout["payload_bits"] == 32


def _small_bytes():
    return serialize(PackedModel((2,), [QuantLayer("affine", np.array([0.5, -1.0]), np.array([[1, 2]]))]))


def test_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        deserialize(b"NOPE" + _small_bytes()[4:])


def test_bad_version():
    data = bytearray(_small_bytes())
    data[4] = 9
    with pytest.raises(FormatError, match="version"):
        deserialize(bytes(data))


@pytest.mark.parametrize("cut", [0, 3, 5, 10, 20])
def test_truncation_reports_offset(cut):
    data = _small_bytes()
    with pytest.raises(FormatError, match="byte offset|magic"):
        deserialize(data[:len(data) - 1 - cut] if cut else data[:-1])


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError, match="trailing"):
        deserialize(_small_bytes() + b"\0")


def test_unknown_layer_kind():
    data = MAGIC + struct.pack("<BBII", 1, 1, 2, 1) + bytes([99])
    with pytest.raises(FormatError, match="unknown layer kind 99"):
        deserialize(data)


def test_assignment_index_above_k_rejected():
    # K = 3 at 2 bits; stored index 3 means A = 4 > K
    layer = QuantLayer("affine", np.array([0.25, 0.5, 1.0]), np.array([[1, 2]]))
    data = bytearray(serialize(PackedModel((2,), [layer])))
    data[-1] = 0b11
    with pytest.raises(FormatError, match="exceeds K"):
        deserialize(bytes(data))


def test_dense_layer_round_trip():
    W = np.random.default_rng(2).normal(size=(3, 4))
    back = deserialize(serialize(PackedModel((4,), [DenseLayer("affine", W, np.ones(3))])))
    assert np.array_equal(back.layers[0].W, W)


def test_random_pow2_models_round_trip():
    for seed in range(5):
        r = np.random.default_rng(seed)
        m = random_pow2_model(r)
        x = random_input(r, m, 4)
        back = deserialize(serialize(m))
        assert np.array_equal(run_inference(m, x, "shift")[0], run_inference(back, x, "shift")[0])
