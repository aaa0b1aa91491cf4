"""Variational Monte Carlo with vector-quantized transformer wavefunctions."""

from .exact import ground_state, rayleigh_quotient
from .flops import FlopLedger
from .hamiltonian import ConfigurationError, heisenberg, tfim
from .model import ModelConfig, VqTransformer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "FlopLedger",
    "ModelConfig",
    "VqTransformer",
    "ground_state",
    "heisenberg",
    "load_checkpoint",
    "rayleigh_quotient",
    "save_checkpoint",
    "tfim",
]
