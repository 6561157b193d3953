"""Small reverse-mode autodiff over numpy, enough for the toy networks."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradcheckReport, gradcheck
from .module import Module, frozen, param
from .ops import forward_op
from .optim import SGD, AdamW, cosine_lr
from .tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    is_grad_enabled,
    no_grad,
    reset_tape,
)

__all__ = [
    "AdamW",
    "CheckpointError",
    "GradcheckReport",
    "Module",
    "SGD",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "cosine_lr",
    "current_tape",
    "forward_op",
    "frozen",
    "gradcheck",
    "is_grad_enabled",
    "load_checkpoint",
    "no_grad",
    "ops",
    "param",
    "reset_tape",
    "save_checkpoint",
]
