"""Experiment configuration read from INI-style text files.

Example::

    [network]
    input_shape = 2
    layers = act_quant, affine:64, batchnorm, relu, act_quant,
             affine:64, batchnorm, relu, act_quant, affine:2

    [quantization]          ; omit the section for a full-precision run
    k = 16
    constraint = pow2       ; unconstrained | pow2 | binary | ternary
                            ; | fixed:v1,v2,... | pruned:p[:inner]
    iterations = 1
    layers = all            ; or comma-separated layer indices
    freeze_pruning_after = 0  ; epoch after which pruning masks stop moving (0 = never)

    [quantization.9]        ; per-layer override (layer index 9)
    k = 4

    [activations]
    bits = 8

    [bn]
    mode = multiplierless   ; or standard

    [optimizer]
    lr = 0.1
    epochs = 60
    batch_size = 32
    decay_every = 0         ; 0 keeps lr constant
    decay_factor = 0.5

    [data]
    kind = synthetic        ; synthetic | csv | idx
    name = two-spirals
    size = 1000

    [run]
    seed = 0
    output_dir = runs       ; default from $LUTQ_OUTPUT_DIR, else ./runs

    [sweep]
    ratios = 0, 0.5, 0.7
    bits = 2, 4
    seeds = 0, 1, 2
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .core import (BINARY, TERNARY, Constraint, FixedSet, LayerPlan, PowerOfTwo, PrunedZero,
                   Unconstrained)
from .errors import ConfigError, ConstraintError
from .layers import WEIGHT_KINDS, LayerSpec

OUTPUT_ENV = "LUTQ_OUTPUT_DIR"


def parse_constraint(text: str) -> Constraint:
    text = text.strip().lower()
    if text in ("", "unconstrained", "none"):
        return Unconstrained()
    if text in ("pow2", "power-of-two"):
        return PowerOfTwo()
    if text == "binary":
        return BINARY
    if text == "ternary":
        return TERNARY
    try:
        if text.startswith("fixed:"):
            return FixedSet(tuple(float(v) for v in text[6:].split(",")))
        if text.startswith("pruned:"):
            frac, _, inner = text[7:].partition(":")
            return PrunedZero(float(frac), parse_constraint(inner))
    except (ValueError, ConstraintError) as exc:
        raise ConfigError(f"bad constraint {text!r}: {exc}") from None
    raise ConfigError(f"unknown constraint {text!r}")


def parse_layers(text: str, act_bits: int = 8) -> list[LayerSpec]:
    """``kind[:arg...]`` items separated by commas or newlines.

    ``affine:O[:nobias]``, ``conv2d:O:kernel[:stride[:padding]][:nobias]``,
    ``batchnorm``, ``relu``, ``flatten``, ``act_quant[:bits]``.
    """
    specs = []
    for item in text.replace("\n", ",").split(","):
        item = item.strip()
        if not item:
            continue
        kind, *args = [p.strip() for p in item.split(":")]
        bias = True
        if args and args[-1] == "nobias":
            bias, args = False, args[:-1]
        try:
            nums = [int(a) for a in args]
            if kind == "affine" and len(nums) == 1:
                specs.append(LayerSpec("affine", nums[0], bias=bias))
            elif kind == "conv2d" and 2 <= len(nums) <= 4:
                stride = nums[2] if len(nums) > 2 else 1
                padding = nums[3] if len(nums) > 3 else 0
                specs.append(LayerSpec("conv2d", nums[0], nums[1], stride, padding, bias=bias))
            elif kind == "act_quant" and len(nums) <= 1:
                specs.append(LayerSpec("act_quant", bits=nums[0] if nums else act_bits))
            elif kind in ("batchnorm", "relu", "flatten") and not nums:
                specs.append(LayerSpec(kind))
            else:
                raise ValueError("wrong number of arguments")
        except ValueError as exc:
            raise ConfigError(f"bad layer {item!r}: {exc}") from None
    if not specs:
        raise ConfigError("network has no layers")
    return specs


@dataclass
class ExperimentConfig:
    layers: list[LayerSpec]
    input_shape: tuple
    plan: dict[int, LayerPlan] = field(default_factory=dict)
    iterations: int = 1
    init_iterations: int = 20
    freeze_pruning_after: int = 0
    act_bits: int = 8
    bn_mode: str = "standard"
    lr: float = 0.1
    epochs: int = 60
    batch_size: int = 32
    decay_every: int = 0
    decay_factor: float = 0.5
    data: dict = field(default_factory=lambda: {"kind": "synthetic", "name": "two-spirals", "size": 1000})
    seed: int = 0
    output_dir: str = "runs"
    sweep_ratios: tuple = (0.0, 0.5, 0.7, 0.9)
    sweep_bits: tuple = (2, 4)
    sweep_seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for i, lp in self.plan.items():
            if not 0 <= i < len(self.layers):
                raise ConfigError(f"quantization plan references layer {i}, network has {len(self.layers)}")
            if self.layers[i].kind not in WEIGHT_KINDS:
                raise ConfigError(f"layer {i} is {self.layers[i].kind}, only affine/conv2d can be quantized")
            if lp.K < 1:
                raise ConfigError(f"layer {i}: K must be >= 1")
        if self.act_bits < 2:
            raise ConfigError("activation bitwidth must be >= 2")
        if self.bn_mode not in ("standard", "multiplierless"):
            raise ConfigError(f"bn mode must be standard or multiplierless, got {self.bn_mode!r}")
        if self.iterations < 1 or self.init_iterations < 1:
            raise ConfigError("k-means iteration counts must be >= 1")
        if self.freeze_pruning_after < 0:
            raise ConfigError("freeze_pruning_after must be >= 0")
        if self.epochs < 0 or self.batch_size < 2 or self.lr < 0:
            raise ConfigError("need epochs >= 0, batch_size >= 2 and lr >= 0")
        if self.decay_every < 0 or self.decay_factor <= 0:
            raise ConfigError("need decay_every >= 0 and decay_factor > 0")

    @property
    def quantized(self) -> bool:
        return bool(self.plan)

    @property
    def multiplierless_bn(self) -> bool:
        return self.bn_mode == "multiplierless"

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch`` (step decay every ``decay_every`` epochs)."""
        if not self.decay_every:
            return self.lr
        return self.lr * self.decay_factor ** (epoch // self.decay_every)

    def plan_by_name(self) -> dict[str, LayerPlan]:
        return {f"{i}.W": lp for i, lp in self.plan.items()}

    def with_plan(self, K: int | None, constraint: Constraint | None = None) -> "ExperimentConfig":
        """Same experiment with one plan applied to every weight layer (``K=None`` removes it)."""
        if K is None:
            return replace(self, plan={})
        plan = {i: LayerPlan(K, constraint or Unconstrained())
                for i, s in enumerate(self.layers) if s.kind in WEIGHT_KINDS}
        return replace(self, plan=plan)


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    try:
        return _from_parser(cp, base_dir)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from None


def _from_parser(cp, base_dir) -> ExperimentConfig:
    if not cp.has_section("network"):
        raise ConfigError("config needs a [network] section")
    act_bits = cp.getint("activations", "bits", fallback=8)
    layers = parse_layers(cp.get("network", "layers", fallback=""), act_bits)
    input_shape = _ints(cp.get("network", "input_shape", fallback=""))
    if not input_shape:
        raise ConfigError("[network] input_shape is required")

    plan, iterations, init_iterations, freeze = {}, 1, 20, 0
    if cp.has_section("quantization"):
        q = cp["quantization"]
        iterations = q.getint("iterations", 1)
        init_iterations = q.getint("init_iterations", 20)
        freeze = q.getint("freeze_pruning_after", 0)
        which = q.get("layers", "all").strip()
        weight_idx = [i for i, s in enumerate(layers) if s.kind in WEIGHT_KINDS]
        chosen = weight_idx if which == "all" else list(_ints(which))
        default = LayerPlan(q.getint("k", 16), parse_constraint(q.get("constraint", "unconstrained")))
        plan = {i: default for i in chosen}
    for section in cp.sections():
        if section.startswith("quantization."):
            idx = int(section.split(".", 1)[1])
            base = plan.get(idx, LayerPlan(cp.getint("quantization", "k", fallback=16)))
            s = cp[section]
            plan[idx] = LayerPlan(s.getint("k", base.K),
                                  parse_constraint(s["constraint"]) if "constraint" in s else base.constraint)

    data = dict(cp["data"]) if cp.has_section("data") else {"kind": "synthetic", "name": "two-spirals"}
    if base_dir is not None:
        for key in ("path", "val_path", "images", "labels", "val_images", "val_labels"):
            if key in data and not os.path.isabs(data[key]):
                data[key] = str(Path(base_dir) / data[key])

    opt = cp["optimizer"] if cp.has_section("optimizer") else {}
    run = cp["run"] if cp.has_section("run") else {}
    sweep = cp["sweep"] if cp.has_section("sweep") else {}
    kw = {}
    if "ratios" in sweep:
        kw["sweep_ratios"] = _floats(sweep["ratios"])
    if "bits" in sweep:
        kw["sweep_bits"] = _ints(sweep["bits"])
    if "seeds" in sweep:
        kw["sweep_seeds"] = _ints(sweep["seeds"])
    return ExperimentConfig(
        layers=layers, input_shape=input_shape, plan=plan, iterations=iterations,
        init_iterations=init_iterations, freeze_pruning_after=freeze, act_bits=act_bits,
        bn_mode=cp.get("bn", "mode", fallback="standard").strip(),
        lr=float(opt.get("lr", 0.1)), epochs=int(opt.get("epochs", 60)),
        batch_size=int(opt.get("batch_size", 32)), decay_every=int(opt.get("decay_every", 0)),
        decay_factor=float(opt.get("decay_factor", 0.5)), data=data,
        seed=int(run.get("seed", 0)),
        output_dir=run.get("output_dir", os.environ.get(OUTPUT_ENV, "runs")), **kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent)
