from .functional import (
    add,
    batchnorm2d,
    conv2d,
    conv_output_size,
    flatten,
    global_avg_pool,
    linear,
    mean,
    mul,
    pointwise_conv,
    relu,
    reshape,
    softmax_cross_entropy,
    sum,
)
from .gradcheck import numerical_gradient, relative_error
from .tensor import (
    ConvWeights,
    Parameter,
    Tensor,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_debug,
    set_default_dtype,
)

__all__ = [
    "ConvWeights",
    "Parameter",
    "Tensor",
    "add",
    "batchnorm2d",
    "conv2d",
    "conv_output_size",
    "default_dtype",
    "flatten",
    "get_default_dtype",
    "global_avg_pool",
    "is_grad_enabled",
    "linear",
    "mean",
    "mul",
    "no_grad",
    "numerical_gradient",
    "pointwise_conv",
    "relative_error",
    "relu",
    "reshape",
    "set_debug",
    "set_default_dtype",
    "softmax_cross_entropy",
    "sum",
]
