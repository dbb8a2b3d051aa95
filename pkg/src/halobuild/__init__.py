"""Building segmentation under haze and low light on a small numpy autodiff core.

Submodules:
    tensor   reverse-mode autodiff tensor, convolutions, resampling, spectra
    modules  encoder, guidance and fusion modules, full segmentation network
    degrade  synthetic scenes, haze and low-light degradation, intensity KDE
    train    loss, optimizer, metrics, error maps, checkpoints, training loop
    audit    finite-difference gradient audit
    cli      command-line entry point
"""
from .config import Config
from .errors import (CheckpointMismatchError, ContractViolation, GradientAuditError, HaloError,
                     IngestionError, TrainingDiverged, UnsupportedConfiguration)
from .modules import NetConfig, ParamStore, init_params, network_forward
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Config", "NetConfig", "ParamStore", "Tensor", "init_params", "network_forward", "no_grad",
    "HaloError", "ContractViolation", "UnsupportedConfiguration", "CheckpointMismatchError",
    "IngestionError", "TrainingDiverged", "GradientAuditError",
]
