"""Numpy autodiff engine with switchable numba/numpy kernels."""

from . import ops
from .backend import backend_name
from .modules import (
    AvgPool1d,
    Conv1d,
    Conv2d,
    Conv3d,
    ConvTranspose1d,
    Dropout,
    Identity,
    LayerNorm,
    LeakyReLU,
    Linear,
    LSTM,
    Module,
    ModuleList,
    Parameter,
    PReLU,
    ReLU,
    Sequential,
    SiLU,
    Tanh,
)
from .tensor import (
    Tensor,
    absolute,
    cast,
    clamp_min,
    concat,
    exp,
    flip,
    getitem,
    glu,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    no_grad,
    pad_constant,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    sqrt,
    tanh,
    tmean,
    tsum,
    transpose,
)
