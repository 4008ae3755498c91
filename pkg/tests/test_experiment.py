import csv
import json

import numpy as np
import pytest

from lutq.config import parse_config
from lutq.core import LayerPlan, PowerOfTwo, init_quantized_layer
from lutq.data import Dataset
from lutq.errors import ConstraintError, ShapeError
from lutq.experiment import (MetricLog, TrainingDiverged, cmd_evaluate, cmd_quantize, cmd_sweep, cmd_train,
                             full_precision, sweep_table, train)
from lutq.inference import fileformat
from lutq.inference.model import DenseLayer, PackedModel, QuantLayer, pack_model
from lutq.numerics import is_pow2
from lutq.data import load_dataset, two_spirals
from oracles import lloyd_bruteforce, partition_error

SMALL = """
[network]
input_shape = 2
layers = act_quant, affine:16, batchnorm, relu, act_quant, affine:2
[optimizer]
lr = {lr}
epochs = {epochs}
batch_size = 16
[data]
kind = synthetic
name = two-spirals
size = 200
"""


def _cfg(lr=0.1, epochs=3, extra=""):
    return parse_config(SMALL.format(lr=lr, epochs=epochs) + extra)


QUANT = "[quantization]\nk = 4\nconstraint = pow2\n[bn]\nmode = multiplierless\n"


def test_zero_lr_gives_constant_log():
    res = train(_cfg(lr=0.0, epochs=4, extra=QUANT))
    log = res.log
    assert log.column("epoch") == [1, 2, 3, 4]
    for col in log.columns:
        if col not in ("epoch",):
            assert len(set(log.column(col))) == 1, col


def test_training_is_deterministic():
    a, b = train(_cfg(extra=QUANT)), train(_cfg(extra=QUANT))
    assert a.log.to_csv() == b.log.to_csv()
    assert fileformat.serialize(pack_model(a.model)) == fileformat.serialize(pack_model(b.model))


def test_seed_changes_run():
    assert train(_cfg(), seed=0).log.to_csv() != train(_cfg(), seed=1).log.to_csv()


def test_metric_log_columns():
    res = train(_cfg(extra=QUANT))
    assert res.log.columns == ["epoch", "lr", "train_loss", "val_error", "sparsity", "footprint_bits",
                               "qerr_1", "qerr_5"]
    with pytest.raises(ValueError):
        MetricLog(["a"]).append({"b": 1})


def test_data_shape_checked():
    bad = Dataset(np.zeros((4, 3)), np.zeros(4, int), 2)
    with pytest.raises(ShapeError):
        train(_cfg(), data=(bad, bad))


def test_cmd_train_writes_artifacts(tmp_path):
    res = cmd_train(_cfg(extra=QUANT), tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 3 and float(rows[-1]["val_error"]) == res.log.rows[-1]["val_error"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["val_error"] == res.val_error and "seconds" not in summary
    model = fileformat.load(tmp_path / "model.lutq")
    for _, layer in model.weight_layers():
        assert isinstance(layer, QuantLayer) and np.all(is_pow2(layer.d[layer.d != 0]))


def test_divergence_keeps_checkpoint(tmp_path):
    with pytest.raises(TrainingDiverged) as info:
        cmd_train(_cfg(lr=1e300, epochs=2), tmp_path)
    assert info.value.exit_code == 5
    assert (tmp_path / "checkpoint.lutq").exists() and not (tmp_path / "model.lutq").exists()


def _dense_model(rng):
    return PackedModel((3,), [DenseLayer("affine", rng.normal(size=(4, 3)), np.zeros(4)),
                              DenseLayer("affine", rng.normal(size=(2, 4)))])


def test_quantize_with_distinct_count_is_exact(rng):
    model = _dense_model(rng)
    model.layers[0].W = model.layers[0].W.astype(np.float32).astype(float)
    res = cmd_quantize(model, {0: LayerPlan(12)})
    assert res.errors[0] == 0.0
    assert np.array_equal(res.model.layers[0].weights(), model.layers[0].W)


def test_quantize_two_bit_matches_lloyd_oracle(rng):
    model = _dense_model(rng)  # layer 1 holds 8 weights
    res = cmd_quantize(model, {1: LayerPlan(4)}, iterations=100)
    W = model.layers[1].W
    A = res.model.layers[1].A
    assert res.errors[1] == pytest.approx(partition_error(W, A, 4), abs=1e-6)
    assert res.errors[1] >= lloyd_bruteforce(W.reshape(-1), 4) - 1e-6
    assert np.array_equal(A, init_quantized_layer(W, 4, iterations=100).A)


def test_quantize_pow2_plan(rng):
    res = cmd_quantize(_dense_model(rng), {0: LayerPlan(4, PowerOfTwo()), 1: LayerPlan(2, PowerOfTwo())})
    for _, layer in res.model.weight_layers():
        assert np.all(is_pow2(layer.d))
    assert "sum (W-Q)^2" in res.error_table()


def test_quantize_errors(rng):
    model = _dense_model(rng)
    with pytest.raises(ConstraintError):
        cmd_quantize(model, {5: LayerPlan(2)})
    once = cmd_quantize(model, {0: LayerPlan(2)}).model
    with pytest.raises(ConstraintError):
        cmd_quantize(once, {0: LayerPlan(2)})


def test_evaluate_deterministic_and_modes_agree():
    cfg = _cfg(extra=QUANT)
    res = train(cfg)
    packed = pack_model(res.model)
    _, va = load_dataset(cfg.data, seed=0)
    runs = {m: cmd_evaluate(packed, va, m) for m in ("dense", "bucket", "shift")}
    assert cmd_evaluate(packed, va).error == runs["dense"].error
    assert np.array_equal(runs["dense"].predictions, runs["bucket"].predictions)
    assert np.array_equal(runs["dense"].predictions, runs["shift"].predictions)
    assert runs["shift"].report.multiplications == 0
    # packed float32 dictionary and folded BN vs the in-memory tied-weight model: same decisions
    assert np.array_equal(runs["dense"].predictions, res.model.predict(va.x))
    assert json.dumps(runs["shift"].to_dict())


def test_random_model_near_chance():
    cfg = _cfg(lr=0.0, epochs=0)
    cfg.data["size"] = 2000
    res = train(cfg)
    assert 30.0 <= res.val_error <= 70.0


def test_full_precision_strips_quantizers():
    cfg = full_precision(_cfg(extra=QUANT))
    assert not cfg.quantized and all(s.kind != "act_quant" for s in cfg.layers)


def test_sweep_grid(tmp_path):
    cfg = _cfg(epochs=1)
    rows = cmd_sweep(cfg, ratios=(0.0, 0.5), bits=(2,), seeds=(0, 1), out_dir=tmp_path)
    assert len(rows) == 2 and all(r["runs"] == 2 and r["K"] == 4 for r in rows)
    assert rows[1]["sparsity"] >= 0.5
    assert len(list(csv.DictReader(open(tmp_path / "sweep.csv")))) == 2
    assert "increase" in sweep_table(rows)
    with pytest.raises(ConstraintError):
        cmd_sweep(cfg, ratios=(), bits=(2,), seeds=(0,))


def test_synthetic_bytes_are_seeded():
    a, b = two_spirals(1000, seed=7), two_spirals(1000, seed=7)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()


TINY = """
[network]
input_shape = 2
layers = affine:4, relu, affine:2
[optimizer]
lr = 1e-4
epochs = 2
batch_size = 16
[data]
kind = synthetic
size = 200
"""


def test_k_equal_distinct_matches_full_precision_run():
    # 8 weights per layer; small steps keep every weight in its own cluster
    fp = train(parse_config(TINY))
    lut = train(parse_config(TINY + "[quantization]\nk = 8\n"))
    assert all(e == 0.0 for e in lut.log.column("qerr_0") + lut.log.column("qerr_2"))
    assert np.max(np.abs(np.subtract(fp.log.column("train_loss"), lut.log.column("train_loss")))) <= 1e-9
    for n, w in fp.model.network.params.items():
        assert np.max(np.abs(w - lut.model.network.params[n])) <= 1e-9


def test_sweep_baseline_point_has_no_increase():
    rows = cmd_sweep(parse_config(TINY), ratios=(0.0,), bits=(3,), seeds=(0,))
    assert rows[0]["K"] == 8 and abs(rows[0]["increase"]) <= 1e-9


def test_sweep_heavy_pruning_hurts():
    rows = cmd_sweep(_cfg(epochs=8), ratios=(0.99,), bits=(1,), seeds=(0,))
    assert rows[0]["increase"] > 0
