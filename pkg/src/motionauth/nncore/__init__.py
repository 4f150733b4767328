"""Small numpy network core with hand-written backward passes."""

from .functional import (
    batchnorm_backward,
    batchnorm_forward,
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    dropout,
    l2_normalize_backward,
    l2_normalize_forward,
    maxpool1d_backward,
    maxpool1d_forward,
    relu,
    sigmoid,
)
from .layers import (
    BatchNorm,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    L2Normalize,
    MaxPool1D,
    ReLU,
    Sequential,
    spec_from_dict,
    spec_to_dict,
)
from .optim import SGD, Adam, adam_step, make_optimizer, sgd_step
from .params import ParamSet, load_params, save_params

__all__ = [
    "Adam", "BatchNorm", "Conv1D", "Dense", "Dropout", "Flatten", "L2Normalize",
    "MaxPool1D", "ParamSet", "ReLU", "SGD", "Sequential", "adam_step",
    "batchnorm_backward", "batchnorm_forward", "conv1d_backward", "conv1d_forward",
    "dense_backward", "dense_forward", "dropout", "l2_normalize_backward",
    "l2_normalize_forward", "load_params", "make_optimizer", "maxpool1d_backward",
    "maxpool1d_forward", "relu", "save_params", "sgd_step", "sigmoid",
    "spec_from_dict", "spec_to_dict",
]
