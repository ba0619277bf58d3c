"""Dense channels-last tensors with reverse-mode autodiff."""
from . import kernels
from .gradcheck import finite_diff_check, relative_error
from .tensor import (
    IGNORE_INDEX,
    Tensor,
    add,
    as_tensor,
    backward,
    channel_dropout,
    concat,
    conv2d,
    cosine_similarity,
    cross_entropy,
    detach,
    is_grad_enabled,
    log_softmax_channels,
    mean,
    mse,
    mul,
    mul_const,
    mul_elementwise,
    nearest_indices,
    nearest_resize,
    neg,
    no_grad,
    pixel_weights,
    relu,
    reshape,
    resize_nearest_array,
    scalar_div,
    scalar_mul,
    softmax_channels,
    sub,
    sum,
    take,
)

__all__ = [
    "IGNORE_INDEX", "Tensor", "add", "as_tensor", "backward", "channel_dropout", "concat",
    "conv2d", "cosine_similarity", "cross_entropy", "detach", "finite_diff_check",
    "is_grad_enabled", "kernels", "log_softmax_channels", "mean", "mse", "mul", "mul_const",
    "mul_elementwise", "nearest_indices", "nearest_resize", "neg", "no_grad", "pixel_weights",
    "relative_error", "relu", "reshape", "resize_nearest_array", "scalar_div", "scalar_mul",
    "softmax_channels", "sub", "sum", "take",
]
