"""Micro tensor/autodiff engine and the three reconstruction networks."""

from .engine import Tensor, set_precision, get_precision  # noqa: F401
from .models import ArchitectureSpec, build_model, encode_input  # noqa: F401
from .training import TrainConfig, TrainedModel, train, predict, ensemble_predict  # noqa: F401
