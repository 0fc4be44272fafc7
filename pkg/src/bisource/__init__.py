"""Desk-scale two-source perception toolkit.

A small numpy-backed tensor engine with tape-based reverse-mode
differentiation, prototype-bridged attention for pairs of aligned feature
maps, a siamese encoder/decoder model for change detection and density
estimation, evaluation metrics, synthetic data generators, a scaling
benchmark, and a command-line front end.
"""

from .ada import INF_PROTOTYPES, AdaConfig, ProtoAttention, SourcePair, StdAttention
from .blocks import ConsistencyBlock, DifferenceBlock
from .gradcheck import GradCheckReport, grad_check
from .model import AdamW, BiSourceModel, ModelConfig, ablation_variant, train_step
from .tensor import (
    NumericalError,
    Parameter,
    Rng,
    ShapeError,
    Tape,
    Tensor,
    alloc_stats,
    backward,
)

__version__ = "0.1.0"

__all__ = [
    "AdaConfig",
    "AdamW",
    "BiSourceModel",
    "ConsistencyBlock",
    "DifferenceBlock",
    "GradCheckReport",
    "INF_PROTOTYPES",
    "ModelConfig",
    "NumericalError",
    "Parameter",
    "ProtoAttention",
    "Rng",
    "ShapeError",
    "SourcePair",
    "StdAttention",
    "Tape",
    "Tensor",
    "ablation_variant",
    "alloc_stats",
    "backward",
    "grad_check",
    "train_step",
    "__version__",
]
