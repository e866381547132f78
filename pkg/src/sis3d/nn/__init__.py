from .functional import (bce_with_logits, conv2d, conv3d, cross_entropy, fc, huber, maxpool3d, relu,
                         roi_pool, scatter_max, sigmoid)
from .gradcheck import GradCheckReport, grad_check
from .layers import Conv2d, Conv3d, Linear, Module
from .optim import SGD, TrainConfig, sgd_step
from .serialize import load_checkpoint, save_checkpoint
from .tensor import ShapeMismatch, Tensor, as_tensor, concat, stack_max

__all__ = [
    "Tensor", "ShapeMismatch", "as_tensor", "concat", "stack_max",
    "conv2d", "conv3d", "maxpool3d", "fc", "relu", "sigmoid", "roi_pool", "scatter_max",
    "cross_entropy", "huber", "bce_with_logits",
    "Module", "Conv2d", "Conv3d", "Linear",
    "SGD", "TrainConfig", "sgd_step",
    "GradCheckReport", "grad_check",
    "save_checkpoint", "load_checkpoint",
]
