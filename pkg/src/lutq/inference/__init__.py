"""Deployable LUT-Q models: packing, file format, execution engine and footprint."""

from .engine import (AccumulatorOverflow, FixedPointTensor, OpCountReport, bucket_sum_affine,
                     predict, run_inference, shift_affine)
from .fileformat import deserialize, load, read_layout, save, serialize
from .footprint import footprint_report, layer_footprint_bits
from .model import (ActQuantLayer, BNLayer, DenseLayer, FlattenLayer, PackedModel, QuantLayer,
                    ReluLayer, index_bits, pack_model)
