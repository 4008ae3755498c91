"""Parameter (and optional activation) memory accounting in bits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConstraintError
from .model import B_FLOAT, DenseLayer, PackedModel, QuantLayer, index_bits


def layer_footprint_bits(N: int, K: int | None = None, b_float: int = B_FLOAT) -> int:
    """``K*b_float + N*ceil(log2 K)`` for a quantized layer, ``N*b_float`` when ``K`` is None."""
    if K is None:
        return N * b_float
    if K < 1 or K > N:
        raise ConstraintError(f"dictionary size K={K} must satisfy 1 <= K <= N={N}")
    return K * b_float + N * index_bits(K)


@dataclass
class LayerFootprint:
    index: int
    kind: str
    N: int
    K: int | None
    bits: int
    baseline_bits: int

    @property
    def ratio(self) -> float:
        return self.baseline_bits / self.bits if self.bits else float("inf")


@dataclass
class FootprintReport:
    layers: list[LayerFootprint] = field(default_factory=list)
    act_bitwidth: int | None = None
    activation_peak_bits: int | None = None
    activation_sum_bits: int | None = None

    @property
    def parameter_bits(self) -> int:
        return sum(l.bits for l in self.layers)

    @property
    def baseline_bits(self) -> int:
        return sum(l.baseline_bits for l in self.layers)

    @property
    def ratio(self) -> float:
        return self.baseline_bits / self.parameter_bits if self.parameter_bits else float("inf")

    def to_dict(self) -> dict:
        out = {"layers": [dict(asdict(l), ratio=l.ratio) for l in self.layers],
               "parameter_bits": self.parameter_bits, "baseline_bits": self.baseline_bits,
               "ratio": self.ratio}
        if self.act_bitwidth is not None:
            out.update(act_bitwidth=self.act_bitwidth, activation_peak_bits=self.activation_peak_bits,
                       activation_sum_bits=self.activation_sum_bits)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        rows = [f"{'layer':>5} {'kind':<8} {'N':>10} {'K':>6} {'bits':>12} {'float bits':>12} {'ratio':>8}"]
        for l in self.layers:
            k = "-" if l.K is None else str(l.K)
            rows.append(f"{l.index:>5} {l.kind:<8} {l.N:>10} {k:>6} {l.bits:>12} {l.baseline_bits:>12} {l.ratio:>8.3f}")
        rows.append(f"{'total':>5} {'':<8} {'':>10} {'':>6} {self.parameter_bits:>12} "
                    f"{self.baseline_bits:>12} {self.ratio:>8.3f}")
        if self.act_bitwidth is not None:
            rows.append(f"activations at {self.act_bitwidth} bits: peak (largest single tensor) "
                        f"{self.activation_peak_bits} bits, sum over all tensors {self.activation_sum_bits} bits")
        return "\n".join(rows)


def footprint_report(model: PackedModel, include_activations: bool = False,
                     act_bitwidth: int = 8) -> FootprintReport:
    """Per weight layer storage in bits and the compression ratio against 32-bit floats.

    Activation memory is per sample. The peak is the largest single tensor
    (input or any layer output); the sum adds all of them.
    """
    report = FootprintReport()
    for i, layer in model.weight_layers():
        K = layer.K if isinstance(layer, QuantLayer) else None
        report.layers.append(LayerFootprint(i, layer.kind, layer.N, K,
                                            layer_footprint_bits(layer.N, K), layer.N * B_FLOAT))
    if include_activations:
        sizes = [int(np.prod(s)) * act_bitwidth for s in model.shapes()]
        report.act_bitwidth = act_bitwidth
        report.activation_peak_bits = max(sizes)
        report.activation_sum_bits = sum(sizes)
    return report
