from .tensor import (
    DTYPE,
    Tensor,
    add,
    broadcast_to,
    concat,
    cos,
    div,
    exp,
    from_op,
    gather_rows,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sin,
    slice_,
    softmax,
    softplus,
    sum_,
    tanh,
    transpose,
)
from .optim import Adam, clip_grad_norm, global_grad_norm
from .rng import derive_seed, generator
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "DTYPE", "Tensor", "add", "broadcast_to", "concat", "cos", "div", "exp",
    "from_op", "gather_rows", "layer_norm", "matmul", "mean", "mul", "relu",
    "reshape", "sin", "slice_", "softmax", "softplus", "sum_", "tanh", "transpose",
    "Adam", "clip_grad_norm", "global_grad_norm",
    "derive_seed", "generator", "load_checkpoint", "save_checkpoint",
]
