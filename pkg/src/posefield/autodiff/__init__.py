from .tensor import (
    Tape,
    Tensor,
    absolute,
    active_tape,
    add,
    affine,
    as_tensor,
    clamp_min,
    concat,
    conv2d,
    cumsum,
    default_dtype,
    div,
    dot,
    exp,
    l1,
    leaky_relu,
    log,
    matmul,
    maxpool2x2,
    mul,
    no_grad,
    reshape,
    set_default_dtype,
    sigmoid,
    sin,
    softmax_cross_entropy,
    softplus,
    take,
    tensor_mean,
    tensor_slice,
    tensor_sum,
    transpose2d,
    upsample_nearest2x,
)
from .nn import Adam, Conv2d, Linear, Module, parameter
from .gradcheck import grad_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam", "Conv2d", "Linear", "Module", "Tape", "Tensor", "absolute",
    "active_tape", "add", "affine", "as_tensor", "clamp_min", "concat", "conv2d",
    "cumsum", "default_dtype", "div", "dot", "exp", "grad_check", "l1",
    "leaky_relu", "load_checkpoint", "log", "matmul", "maxpool2x2", "mul",
    "no_grad", "parameter", "reshape", "save_checkpoint", "set_default_dtype", "sigmoid",
    "sin", "softmax_cross_entropy", "softplus", "take", "tensor_mean",
    "tensor_slice", "tensor_sum", "transpose2d", "upsample_nearest2x",
]
