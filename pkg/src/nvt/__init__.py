"""Vision Transformer with linear-transform batch noise, plus its training and evaluation tooling."""

from nvt.model import ViTConfig, forward, init_params, load_checkpoint, param_count, save_checkpoint
from nvt.noise import NoiseConfig, build_quality_matrix, entropy_delta_exact, inject
from nvt.tensor import Tensor, grad_check, lu_logdet, no_grad

__all__ = [
    "NoiseConfig",
    "Tensor",
    "ViTConfig",
    "build_quality_matrix",
    "entropy_delta_exact",
    "forward",
    "grad_check",
    "init_params",
    "inject",
    "load_checkpoint",
    "lu_logdet",
    "no_grad",
    "param_count",
    "save_checkpoint",
]
