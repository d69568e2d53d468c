"""Stage-by-stage knowledge distillation at desk scale.

A self-contained laboratory: a small tape-based autodiff engine, staged
CNN teacher/student pairs, the stage-wise and baseline distillation
procedures, and an experiment harness with deterministic runs.
"""

__version__ = "0.1.0"

from .tensor import Parameter, Tape, Tensor, backward
from .models import ModelConfig, StagedModel, build_model, repartition

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "ModelConfig",
    "StagedModel",
    "build_model",
    "repartition",
]
