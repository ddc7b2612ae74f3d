from . import ops
from .gradcheck import finite_diff_check
from .module import ConvBlock, Dense, Module, parameter
from .ops import BatchNormStats
from .optim import Adam, ParamGroup, adam_step
from .tensor import Tape, Tensor, backward, clear_grads, inject_fault, no_record

__all__ = [
    "Adam",
    "BatchNormStats",
    "ConvBlock",
    "Dense",
    "Module",
    "ParamGroup",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "clear_grads",
    "finite_diff_check",
    "inject_fault",
    "no_record",
    "ops",
    "parameter",
]
