"""Reverse-mode tensor engine: Tensor, layer ops and the gradient verifier."""

from .gradcheck import finite_diff_check
from .ops import (
    add,
    batchnorm,
    conv3d,
    cross_entropy,
    dense,
    l2_loss,
    leaky_relu,
    maxpool3d,
    reshape,
    scale,
    sigmoid,
    tconv3d,
)
from .tensor import Tensor, as_tensor, check_finite, dump_tensor, load_tensor

__all__ = [
    "Tensor",
    "as_tensor",
    "check_finite",
    "dump_tensor",
    "load_tensor",
    "finite_diff_check",
    "add",
    "scale",
    "reshape",
    "conv3d",
    "tconv3d",
    "leaky_relu",
    "sigmoid",
    "batchnorm",
    "maxpool3d",
    "dense",
    "cross_entropy",
    "l2_loss",
]
