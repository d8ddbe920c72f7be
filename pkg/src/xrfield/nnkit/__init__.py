"""Small reverse-mode autodiff kernel sized for the view-conditioned field network."""
from .ops import (add, avg_pool, bilinear_gather, bilinear_resize, bilinear_upsample, concat,
                  conv2d, dense, mean_over_views, mean_squared_sum, relu, reshape, scale,
                  softplus, sub, take, total, transpose, weighted_sum)
from .optim import AdamState, adam_step
from .params import ParamStore, accumulate_gradients, compensated_sum, init_conv, init_dense
from .tensor import Tape, Tensor

__all__ = [
    "Tape", "Tensor", "ParamStore", "AdamState", "adam_step", "accumulate_gradients",
    "compensated_sum", "init_conv", "init_dense", "add", "avg_pool", "bilinear_gather",
    "bilinear_resize", "bilinear_upsample", "concat", "conv2d", "dense", "mean_over_views",
    "mean_squared_sum", "relu", "reshape", "scale", "softplus", "sub", "take", "total", "transpose",
    "weighted_sum",
]
