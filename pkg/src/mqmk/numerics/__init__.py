from .optim import Adam, AdamState, adam_step
from .tensor import (
    MASK_VALUE,
    DegenerateVectorError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backprop,
    concat_tokens,
    cosine_similarity,
    cross_entropy,
    gelu,
    identity,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    slice_,
    softmax,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "Adam", "AdamState", "adam_step", "MASK_VALUE", "DegenerateVectorError", "ShapeError",
    "Tensor", "add", "as_tensor", "backprop", "concat_tokens", "cosine_similarity",
    "cross_entropy", "gelu", "identity", "layer_norm", "log_softmax", "masked_fill", "matmul",
    "mean", "mul", "no_grad", "reshape", "slice_", "softmax", "sub", "sum_", "transpose",
]
