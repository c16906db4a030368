"""Minimal dense-array autodiff: tensors, conv/shuffle kernels, Adam."""

from .tensor import (
    GraphError,
    Tensor,
    absolute,
    add,
    backward,
    from_op,
    leaky_relu,
    mul,
    neg,
    relu,
    scale,
    scale_by_element,
    scale_shift,
    slice_leading,
    square,
    ste_select,
    sub,
    tmean,
    tsum,
)
from .conv import conv2d, conv2d_raw, pixel_shuffle, space_to_depth
from .optim import Adam, adam_step
from .serialize import read_tensor, write_tensor

__all__ = [
    "GraphError",
    "Tensor",
    "absolute",
    "add",
    "backward",
    "from_op",
    "leaky_relu",
    "mul",
    "neg",
    "relu",
    "scale",
    "scale_by_element",
    "scale_shift",
    "slice_leading",
    "square",
    "ste_select",
    "sub",
    "tmean",
    "tsum",
    "conv2d",
    "conv2d_raw",
    "pixel_shuffle",
    "space_to_depth",
    "Adam",
    "adam_step",
    "read_tensor",
    "write_tensor",
]
