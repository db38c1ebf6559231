"""Minimal float64 tensor library with reverse-mode differentiation."""

from . import ops
from .gradcheck import grad_check
from .layers import (
    causal_mask,
    conv1d,
    dense,
    lstm_run,
    lstm_step,
    maxpool1d,
    multi_head_attention,
    positional_encoding,
)
from .losses import gaussian_nll, mse_loss, positive_sigma
from .optim import AdamState, adam_step
from .params import ParamSet
from .tensor import Tape, Tensor, as_tensor, backward, current_tape

__all__ = [
    "AdamState", "ParamSet", "Tape", "Tensor", "adam_step", "as_tensor", "backward",
    "causal_mask", "conv1d", "current_tape", "dense", "gaussian_nll", "grad_check",
    "lstm_run", "lstm_step", "maxpool1d", "mse_loss", "multi_head_attention", "ops",
    "positional_encoding", "positive_sigma",
]
