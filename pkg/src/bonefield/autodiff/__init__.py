from .tensor import (
    ShapeMismatchError,
    Tensor,
    abs_,
    add,
    apply_rigid,
    as_tensor,
    backward,
    bone_softmax_gather,
    clip,
    concat,
    cos,
    cumsum,
    div,
    exp,
    getitem,
    grid_gather,
    l2norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    sin,
    skew,
    softmax,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    swap_last2,
    transpose,
)
from .params import ParameterStore, read_checkpoint, write_checkpoint
from .gradcheck import grad_check
