"""Geometry-aware 3D hand mesh recovery on a small numpy autodiff engine."""
from .config import Config, ConfigError
from .data import Dataset, synth_generate
from .hand_model import HandParams, HandTemplate, build_template, decode, forward_kinematics
from .metrics import f_score, mpjpe, pa_error, procrustes_align
from .model import GeoHand
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"
__all__ = ["Config", "ConfigError", "Dataset", "synth_generate", "HandParams", "HandTemplate",
           "build_template", "decode", "forward_kinematics", "f_score", "mpjpe", "pa_error",
           "procrustes_align", "GeoHand", "Tensor", "backward", "grad_check", "no_grad"]
