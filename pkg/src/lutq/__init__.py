"""Look-up table quantization (LUT-Q) for small feed-forward networks.

Weights of a layer are tied to a dictionary ``d`` of K values through an
assignment matrix ``A``; both are refreshed by k-means after every minibatch.
"""

from .core import (BINARY, TERNARY, FixedSet, LayerPlan, LutqModel, PowerOfTwo, PrunedZero,
                   freeze_pruning,
                   QuantizedLayerState, Unconstrained, assign_step, centroid_step, check_invariants,
                   init_quantized_layer, kmeans_update, lutq_train_step, project_constraint,
                   quantization_error, sparsity, tied_weights)
from .errors import (ConfigError, ConstraintError, DataError, FormatError, LutqError, ModeError,
                     NonFiniteError, ShapeError)
from .layers import BNState, LayerSpec, Network, calibrate_act_range
from .mlbn import fold_bn, fold_bn_pow2

__version__ = "0.1.0"
