"""From-scratch numeric stack: sequence encoder, graph network, training loop.

Everything is float64 numpy with hand-written backward passes; gradient
correctness is enforced by finite-difference checks in the test suite.
"""

from .encoder import EncoderConfig, init_encoder_params, encoder_forward, encoder_backward
from .gcn import GcnConfig, init_gcn_params, gcn_forward, gcn_backward
from .training import (
    TrainConfig,
    sequence_head,
    class_weights,
    encode_path,
    weighted_cross_entropy,
    interpolate,
    init_path_nodes,
    train,
    gradient_check,
    DetectorBundle,
    Prediction,
)

__all__ = [
    "EncoderConfig", "init_encoder_params", "encoder_forward", "encoder_backward",
    "GcnConfig", "init_gcn_params", "gcn_forward", "gcn_backward",
    "TrainConfig", "class_weights", "weighted_cross_entropy", "interpolate",
    "init_path_nodes", "train", "gradient_check", "DetectorBundle", "Prediction",
    "encode_path", "sequence_head",
]
