"""Small dense-tensor engine with reverse-mode differentiation."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add,
    affine,
    conv2d,
    entropy,
    global_avg_pool,
    maxpool2d,
    record_kinks,
    relu,
    scale,
    softmax,
    softmax_cross_entropy,
    tsum,
)
from .optim import SGD, sgd_step
from .tensor import Parameter, Tape, Tensor, backward, default_dtype, precision

__all__ = [
    "CheckpointError", "GradCheckReport", "Parameter", "SGD", "Tape", "Tensor",
    "add", "affine", "backward", "conv2d", "default_dtype", "entropy", "global_avg_pool",
    "grad_check", "load_checkpoint", "maxpool2d", "precision", "record_kinks", "relu",
    "save_checkpoint", "scale", "sgd_step", "softmax", "softmax_cross_entropy", "tsum",
]
