from . import kernels
from .tensor import (
    COS_EPS,
    ShapeError,
    Tensor,
    add,
    amax,
    as_tensor,
    causal_mask,
    concat,
    cosine_similarity,
    cross_entropy,
    default_dtype,
    div,
    embedding,
    exp,
    expand,
    gelu,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    ones,
    op_catalog,
    randn,
    reshape,
    scale,
    set_default_dtype,
    softmax,
    split,
    sub,
    sum_,
    swapaxes,
    transpose,
    zeros,
)
