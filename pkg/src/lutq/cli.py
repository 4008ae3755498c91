"""Command line entry point: ``lutq {train,quantize,evaluate,sweep,inspect,footprint}``.

Exit codes: 0 success, 1 unexpected library error, 2 invalid config, plan or
shapes, 3 data or I/O problems, 4 malformed model file, 5 training diverged,
6 execution mode incompatible with the model.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config, parse_constraint
from .core import LayerPlan
from .data import load_dataset
from .errors import ConstraintError, LutqError
from .experiment import cmd_evaluate, cmd_quantize, cmd_sweep, cmd_train, sweep_table
from .inference import fileformat
from .inference.footprint import footprint_report
from .inference.model import ActQuantLayer, BNLayer, DenseLayer, QuantLayer

IO_EXIT = 3


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _emit(args, text, payload):
    print(json.dumps(payload, indent=2) if args.json else text)


def run_train(args):
    cfg = load_config(args.config)
    result = cmd_train(cfg, args.output_dir, args.seed)
    out = Path(args.output_dir or cfg.output_dir)
    _emit(args, f"validation error {result.val_error:.2f}% after {cfg.epochs} epochs; "
                f"wrote {out / 'metrics.csv'}, {out / 'model.lutq'}, {out / 'summary.json'}",
          result.summary)


def run_quantize(args):
    model = fileformat.load(args.model)
    layers = _ints(args.layers) if args.layers else [i for i, l in model.weight_layers()
                                                     if isinstance(l, DenseLayer)]
    if not layers:
        raise ConstraintError(f"{args.model} has no full-precision weight layers to quantize")
    plan = {i: LayerPlan(args.k, parse_constraint(args.constraint)) for i in layers}
    res = cmd_quantize(model, plan, args.iterations)
    fileformat.save(res.model, args.output)
    fp = footprint_report(res.model)
    _emit(args, f"{fp.to_text()}\n\n{res.error_table()}\nwrote {args.output}",
          {"footprint": fp.to_dict(), "quantization_error": {str(k): v for k, v in res.errors.items()}})


def run_evaluate(args):
    cfg = load_config(args.config)
    model = fileformat.load(args.model)
    seed = cfg.seed if args.seed is None else args.seed
    train, val = load_dataset(cfg.data, seed=seed)
    data = val if args.split == "val" else train
    res = cmd_evaluate(model, data, args.mode, args.bn)
    _emit(args, f"error {res.error:.2f}% on {len(data)} samples (ties {res.tie_rate:.4f})\n"
                f"{res.report.to_text()}", res.to_dict())


def run_sweep(args):
    cfg = load_config(args.config)
    rows = cmd_sweep(cfg, _floats(args.ratios) if args.ratios else None,
                     _ints(args.bits) if args.bits else None,
                     _ints(args.seeds) if args.seeds else None,
                     out_dir=args.output_dir or cfg.output_dir)
    _emit(args, sweep_table(rows), rows)


def _describe(i, layer):
    if isinstance(layer, QuantLayer):
        return f"{i:>3} {layer.kind:<9} shape={layer.shape} K={layer.K} constraint={layer.constraint}"
    if isinstance(layer, DenseLayer):
        return f"{i:>3} {layer.kind:<9} shape={layer.shape} full precision"
    if isinstance(layer, BNLayer):
        return f"{i:>3} batchnorm channels={layer.channels} pow2={layer.pow2}"
    if isinstance(layer, ActQuantLayer):
        return f"{i:>3} act_quant bits={layer.bits} r={layer.r}"
    return f"{i:>3} {type(layer).__name__.replace('Layer', '').lower()}"


def run_inspect(args):
    data = Path(args.model).read_bytes()
    model = fileformat.deserialize(data)
    layout = fileformat.read_layout(data)
    lines = [f"{args.model}: {len(data)} bytes, format v{fileformat.VERSION}, input {model.input_shape}"]
    lines += [_describe(i, l) for i, l in enumerate(model.layers)]
    for rec in layout:
        lines.append(f"layer {rec['layer']}: payload {rec['payload_bits']} bits "
                     f"(dictionary {rec['dictionary_bytes'] * 8}, assignments {rec['assignment_bits']}, "
                     f"padding {rec['padding_bits']})")
    payload = {"bytes": len(data), "input_shape": list(model.input_shape),
               "layers": [_describe(i, l).split(None, 1)[1] for i, l in enumerate(model.layers)],
               "layout": layout}
    _emit(args, "\n".join(lines), payload)


def run_footprint(args):
    model = fileformat.load(args.model)
    rep = footprint_report(model, args.activations, args.act_bits)
    _emit(args, rep.to_text(), rep.to_dict())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lutq", description="LUT-Q training and quantized inference")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.set_defaults(func=func)
        return sp

    sp = cmd("train", run_train, "train a network (full precision or LUT-Q) from a config")
    sp.add_argument("config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output-dir")

    sp = cmd("quantize", run_quantize, "post-hoc quantize a full-precision model file")
    sp.add_argument("model")
    sp.add_argument("-k", "--k", type=int, default=16)
    sp.add_argument("--constraint", default="unconstrained")
    sp.add_argument("--layers", help="comma-separated layer indices (default: all full-precision layers)")
    sp.add_argument("--iterations", type=int, default=20)
    sp.add_argument("-o", "--output", required=True)

    sp = cmd("evaluate", run_evaluate, "error rate and operation counts of a model file")
    sp.add_argument("model")
    sp.add_argument("config", help="config whose [data] section and seed define the dataset")
    sp.add_argument("--mode", choices=("dense", "bucket", "shift"), default="dense")
    sp.add_argument("--bn", choices=("auto", "shift", "multiply"), default="auto")
    sp.add_argument("--split", choices=("val", "train"), default="val")
    sp.add_argument("--seed", type=int)

    sp = cmd("sweep", run_sweep, "pruning ratio x bitwidth grid")
    sp.add_argument("config")
    sp.add_argument("--ratios")
    sp.add_argument("--bits")
    sp.add_argument("--seeds")
    sp.add_argument("--output-dir")

    sp = cmd("inspect", run_inspect, "describe a model file and its payload layout")
    sp.add_argument("model")

    sp = cmd("footprint", run_footprint, "memory footprint of a model file")
    sp.add_argument("model")
    sp.add_argument("--activations", action="store_true")
    sp.add_argument("--act-bits", type=int, default=8)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except LutqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
