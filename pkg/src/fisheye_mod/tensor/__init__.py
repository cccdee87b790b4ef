from .core import GradTape, Tensor, current_tape
from .ops import (
    add,
    avg_pool2d,
    batch_norm,
    channel_shuffle,
    concat,
    conv2d,
    conv2d_transposed,
    max_pool2d,
    relu,
    shuffle_permutation,
    weighted_cross_entropy,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "GradTape",
    "Tensor",
    "adam_step",
    "add",
    "avg_pool2d",
    "batch_norm",
    "channel_shuffle",
    "concat",
    "conv2d",
    "conv2d_transposed",
    "current_tape",
    "max_pool2d",
    "relu",
    "shuffle_permutation",
    "weighted_cross_entropy",
]
