from .ops import add, concat, conv2d, deform_conv2d, getitem, mse, mul, relu, reshape, sigmoid, sub, sum_all
from .optim import SGD, Adam, OptimConfig, clip_gradients, global_norm, make_optimizer
from .tensor import NonFiniteError, Tensor, as_tensor, backward, check_finite

__all__ = [
    "Adam", "NonFiniteError", "OptimConfig", "SGD", "Tensor", "add", "as_tensor", "backward",
    "check_finite", "clip_gradients", "concat", "conv2d", "deform_conv2d", "getitem", "global_norm",
    "make_optimizer", "mse", "mul", "relu", "reshape", "sigmoid", "sub", "sum_all",
]
