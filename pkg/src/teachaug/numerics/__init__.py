"""Tensor arithmetic with reverse-mode gradients, layers, optimizers, gradcheck."""
from . import ops
from .gradcheck import GradCheckResult, check_gradients, finite_diff_grad, relative_error
from .layers import MLP3, Conv2d, Linear, Module, linear_forward
from .ops import dropout, leaky_relu, sigmoid, softmax_cross_entropy
from .optim import Optimizer, OptimizerState, optimizer_step
from .rng import RngStreams
from .tensor import Tensor, as_tensor, no_grad

__all__ = [
    "ops", "Tensor", "as_tensor", "no_grad", "Module", "Linear", "MLP3", "Conv2d",
    "linear_forward", "leaky_relu", "sigmoid", "dropout", "softmax_cross_entropy",
    "Optimizer", "OptimizerState", "optimizer_step", "finite_diff_grad", "check_gradients",
    "relative_error", "GradCheckResult", "RngStreams",
]
