"""Training, post-hoc quantization, evaluation and sweeps driven by an ExperimentConfig."""

from __future__ import annotations

import copy
import csv
import json
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .core import (LayerPlan, LutqModel, PrunedZero, Unconstrained, constraint_name,
                   freeze_pruning, init_quantized_layer, lutq_train_step, quantization_error)
from .data import Dataset, load_dataset
from .errors import ConstraintError, NonFiniteError, ShapeError
from .inference import fileformat
from .inference.engine import run_inference
from .inference.footprint import footprint_report, layer_footprint_bits
from .inference.model import DenseLayer, PackedModel, QuantLayer, pack_model
from .layers import Network, calibrate_act_range, recalibrate

# samples used for epoch-end BN statistics and activation ranges
CALIBRATION_SIZE = 1024


class TrainingDiverged(NonFiniteError):
    """Loss or parameters became non-finite; ``checkpoint`` is the last good model."""

    def __init__(self, message, checkpoint: LutqModel, epoch: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class MetricLog:
    """Append-only per-epoch metric table with a fixed column set."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows: list[dict] = []

    def append(self, row: dict):
        if set(row) != set(self.columns):
            raise ValueError(f"metric row keys {sorted(row)} differ from columns {self.columns}")
        self.rows.append(dict(row))

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[c]) for c in self.columns))
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_csv())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class TrainResult:
    model: LutqModel
    log: MetricLog
    val_error: float
    seconds: float
    summary: dict = field(default_factory=dict)


def build_network(cfg: ExperimentConfig, seed: int) -> Network:
    return Network.build(cfg.layers, cfg.input_shape, seed=seed, multiplierless_bn=cfg.multiplierless_bn)


def error_rate(model: LutqModel, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return 100.0 * float(np.mean(model.predict(data.x) != data.y))


def full_loss(model: LutqModel, data: Dataset) -> float:
    """Inference-mode cross-entropy over the whole set."""
    net = model.network
    g, _, loss = net.graph(training=False)
    return float(ad.evaluate(g, net.feeds(data.x, data.y, overrides=model.tied()))[loss])


def model_sparsity(model: LutqModel) -> float:
    tied = model.tied()
    ws = [tied.get(n, model.network.params[n]) for n in model.network.weight_names()]
    total = sum(w.size for w in ws)
    return float(sum(np.count_nonzero(w == 0) for w in ws) / total) if total else 0.0


def model_footprint_bits(model: LutqModel) -> int:
    bits = 0
    for name in model.network.weight_names():
        n = model.network.params[name].size
        st = model.states.get(name)
        bits += layer_footprint_bits(n, st.K if st is not None else None)
    return bits


def _metric_columns(cfg: ExperimentConfig):
    return (["epoch", "lr", "train_loss", "val_error", "sparsity", "footprint_bits"]
            + [f"qerr_{i}" for i in sorted(cfg.plan)])


def _run_epoch(cfg, model, epoch, lr, tr, va, calib, rng, on_kmeans) -> dict:
    net = model.network
    order = rng.permutation(len(tr))
    for start in range(0, len(tr), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        if len(idx) < 2:
            continue  # BN needs two samples; the remainder rejoins next epoch
        info = lutq_train_step(model, tr.x[idx], tr.y[idx], lr, on_kmeans=on_kmeans)
        if not np.isfinite(info.loss) or not all(np.all(np.isfinite(p)) for p in net.params.values()):
            raise NonFiniteError("loss became non-finite")
    if cfg.freeze_pruning_after and epoch + 1 == cfg.freeze_pruning_after:
        model.states = {k: freeze_pruning(st) for k, st in model.states.items()}
    recalibrate(net, calib, overrides=model.tied())
    row = {"epoch": epoch + 1, "lr": lr, "train_loss": full_loss(model, tr),
           "val_error": error_rate(model, va), "sparsity": model_sparsity(model),
           "footprint_bits": model_footprint_bits(model)}
    for i in sorted(cfg.plan):
        row[f"qerr_{i}"] = quantization_error(model.states[f"{i}.W"])
    if not np.isfinite(row["train_loss"]):
        raise NonFiniteError("training loss became non-finite")
    return row


def train(cfg: ExperimentConfig, seed: int | None = None, data=None, on_kmeans=None) -> TrainResult:
    """Full-precision SGD (empty plan) or LUT-Q training, one row in the log per epoch.

    Every epoch ends with :func:`recalibrate` on the first ``CALIBRATION_SIZE``
    training samples, then the metrics are taken in inference mode.
    """
    seed = cfg.seed if seed is None else seed
    started = time.perf_counter()
    tr, va = data if data is not None else load_dataset(cfg.data, seed=seed)
    if tuple(tr.x.shape[1:]) != tuple(cfg.input_shape):
        raise ShapeError(f"data samples have shape {tr.x.shape[1:]}, network expects {cfg.input_shape}")
    net = build_network(cfg, seed)
    calib = tr.x[:CALIBRATION_SIZE]
    if net.act:
        # no running statistics yet: take initial ranges from batch statistics
        calibrate_act_range(net, calib, training=True)
    model = LutqModel.from_network(net, cfg.plan_by_name(), cfg.iterations, cfg.init_iterations)
    rng = np.random.default_rng(seed)
    log = MetricLog(_metric_columns(cfg))
    checkpoint = copy.deepcopy(model)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        try:
            # overflow shows up as NonFiniteError from the graph or the checks below
            with np.errstate(over="ignore", invalid="ignore"):
                row = _run_epoch(cfg, model, epoch, lr, tr, va, calib, rng, on_kmeans)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch + 1}: {exc}", checkpoint, epoch) from exc
        log.append(row)
        checkpoint = copy.deepcopy(model)
    if cfg.epochs == 0:
        recalibrate(net, calib, overrides=model.tied())
    val_error = error_rate(model, va)
    seconds = time.perf_counter() - started
    summary = {"seed": seed, "epochs": cfg.epochs, "val_error": val_error,
               "sparsity": model_sparsity(model), "footprint_bits": model_footprint_bits(model),
               "baseline_bits": sum(net.params[n].size * 32 for n in net.weight_names()),
               "quantization": {str(i): {"K": lp.K, "constraint": constraint_name(lp.constraint)}
                                for i, lp in sorted(cfg.plan.items())},
               "bn_mode": cfg.bn_mode}
    return TrainResult(model, log, val_error, seconds, summary)


def _output_dir(cfg, out_dir):
    path = Path(out_dir if out_dir is not None else cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(cfg: ExperimentConfig, out_dir=None, seed: int | None = None) -> TrainResult:
    """Train and write ``metrics.csv``, ``summary.json`` and ``model.lutq``.

    On divergence the last good epoch's model is written as ``checkpoint.lutq``
    before the error propagates.
    """
    out = _output_dir(cfg, out_dir)
    try:
        result = train(cfg, seed)
    except TrainingDiverged as exc:
        fileformat.save(pack_model(exc.checkpoint), out / "checkpoint.lutq")
        raise
    result.log.write(out / "metrics.csv")
    packed = pack_model(result.model)
    fileformat.save(packed, out / "model.lutq")
    result.summary["footprint"] = footprint_report(packed, True, cfg.act_bits).to_dict()
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    return result


@dataclass
class QuantizeResult:
    model: PackedModel
    errors: dict[int, float]

    def error_table(self) -> str:
        rows = [f"{'layer':>5} {'sum (W-Q)^2':>16}"]
        rows += [f"{i:>5} {e:>16.6g}" for i, e in sorted(self.errors.items())]
        return "\n".join(rows)


def cmd_quantize(model: PackedModel, plan: dict[int, LayerPlan], iterations: int = 20) -> QuantizeResult:
    """Post-hoc LUT-Q: replace each planned full-precision layer by dictionary + assignments."""
    weight_idx = {i for i, _ in model.weight_layers()}
    layers = list(model.layers)
    errors = {}
    for i, lp in sorted(plan.items()):
        if i not in weight_idx:
            raise ConstraintError(f"plan names layer {i}, which is not a weight layer of the model")
        layer = layers[i]
        if not isinstance(layer, DenseLayer):
            raise ConstraintError(f"layer {i} is already quantized")
        st = init_quantized_layer(layer.W, lp.K, lp.constraint, iterations)
        d32 = np.asarray(st.d, dtype=np.float32).astype(np.float64)
        layers[i] = QuantLayer(layer.kind, d32, st.A, layer.bias, layer.stride, layer.padding,
                               constraint_name(lp.constraint))
        errors[i] = float(np.sum((layer.W - d32[st.A - 1]) ** 2))
    return QuantizeResult(PackedModel(model.input_shape, layers), errors)


@dataclass
class EvalResult:
    error: float
    predictions: np.ndarray
    report: object
    tie_rate: float

    def to_dict(self):
        return {"error": self.error, "tie_rate": self.tie_rate, "samples": int(self.predictions.size),
                "ops": self.report.to_dict()}


def cmd_evaluate(model: PackedModel, data: Dataset, mode: str = "dense", bn_mode: str = "auto") -> EvalResult:
    """Top-1 error % and operation counts; ``tie_rate`` is the fraction of samples whose
    two largest outputs are within 1e-9 (where cross-mode argmax may legitimately differ)."""
    if tuple(data.x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"data samples have shape {data.x.shape[1:]}, model expects {model.input_shape}")
    out, report = run_inference(model, data.x, mode, bn_mode)
    pred = np.argmax(out, axis=1)
    top2 = np.sort(out, axis=1)[:, -2:] if out.shape[1] > 1 else np.zeros((len(out), 2))
    ties = float(np.mean(top2[:, 1] - top2[:, 0] <= 1e-9)) if out.shape[1] > 1 else 0.0
    return EvalResult(100.0 * float(np.mean(pred != data.y)), pred, report, ties)


def _median(vals):
    return float(statistics.median(vals))


def full_precision(cfg: ExperimentConfig) -> ExperimentConfig:
    """The same network with no weight quantization and no activation quantizers."""
    return replace(cfg, plan={}, layers=[s for s in cfg.layers if s.kind != "act_quant"])


def sweep_point_plan(cfg: ExperimentConfig, ratio: float, bits: int, inner=None) -> ExperimentConfig:
    inner = inner if inner is not None else Unconstrained()
    c = PrunedZero(ratio, inner) if ratio > 0 else inner
    return cfg.with_plan(2 ** bits, c)


def cmd_sweep(cfg: ExperimentConfig, ratios=None, bits=None, seeds=None, out_dir=None, inner=None):
    """Pruning-ratio x bitwidth grid; each point's median validation error over ``seeds``
    minus the median full-precision baseline. Returns the table rows."""
    ratios = tuple(cfg.sweep_ratios if ratios is None else ratios)
    bits = tuple(cfg.sweep_bits if bits is None else bits)
    seeds = tuple(cfg.sweep_seeds if seeds is None else seeds)
    if not ratios or not bits or not seeds:
        raise ConstraintError("sweep grid is empty")
    datasets = {s: load_dataset(cfg.data, seed=s) for s in seeds}
    base_cfg = full_precision(cfg)
    baseline = _median([train(base_cfg, s, datasets[s]).val_error for s in seeds])
    rows = []
    for b in bits:
        for r in ratios:
            point = sweep_point_plan(cfg, r, b, inner)
            results = [train(point, s, datasets[s]) for s in seeds]
            err = _median([res.val_error for res in results])
            rows.append({"ratio": r, "bits": b, "K": 2 ** b, "val_error": err,
                         "increase": err - baseline, "baseline": baseline,
                         "sparsity": _median([res.summary["sparsity"] for res in results]),
                         "min_sparsity": min(res.summary["sparsity"] for res in results),
                         "footprint_bits": results[0].summary["footprint_bits"], "runs": len(results)})
    if out_dir is not None:
        out = _output_dir(cfg, out_dir)
        cols = list(rows[0])
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, cols)
            w.writeheader()
            w.writerows(rows)
        (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    return rows


def sweep_table(rows) -> str:
    lines = [f"{'ratio':>6} {'bits':>4} {'val err %':>10} {'increase':>9} {'sparsity':>9}"]
    for r in rows:
        lines.append(f"{r['ratio']:>6.2f} {r['bits']:>4} {r['val_error']:>10.2f} "
                     f"{r['increase']:>+9.2f} {r['sparsity']:>9.3f}")
    return "\n".join(lines)
