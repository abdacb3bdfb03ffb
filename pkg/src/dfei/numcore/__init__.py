"""Dense float64 tensors, reverse-mode gradients, MLP layers and Adam."""

from .autograd import (
    Tensor,
    add,
    binary_cross_entropy,
    broadcast_rows,
    compute_gradients,
    concat,
    dropout,
    embedding_lookup,
    matmul,
    mean,
    mul,
    relu,
    rowwise_dot,
    scale,
    sigmoid,
    softmax,
    sum_all,
    sum_squares,
    transpose,
)
from .nn import Linear, MLPSpec, derived_rng, embedding_uniform, glorot_uniform, mlp_forward
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "Linear", "MLPSpec", "Tensor", "adam_step", "add",
    "binary_cross_entropy", "broadcast_rows", "compute_gradients", "concat",
    "derived_rng", "dropout", "embedding_lookup", "embedding_uniform",
    "glorot_uniform", "matmul", "mean", "mlp_forward", "mul", "relu",
    "rowwise_dot", "scale", "sigmoid", "softmax", "sum_all", "sum_squares",
    "transpose",
]
