from .engine import (  # noqa: F401
    Tensor,
    tensor,
    no_grad,
    backward,
    reset_tape,
    tape_size,
    add,
    sub,
    mul,
    div,
    matmul,
    relu,
    sigmoid,
    tanh,
    softplus,
    exp,
    log,
    sqrt,
    abs_,
    clamp,
    sum_,
    mean,
    reshape,
    transpose,
    concat,
    stack,
    getitem,
    gather_rows,
    pad2d,
    softmax,
    conv2d,
    bilinear_upsample,
    correlation_volume,
    corr_lookup,
)
from .nn import Conv2d, GroupNorm, Module, Parameter, ReLU, ResidualBlock, Sequential  # noqa: F401
from .optim import AdamW  # noqa: F401
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
