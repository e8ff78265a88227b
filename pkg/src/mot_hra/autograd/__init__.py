from .ops import (
    add,
    add_bias,
    concat,
    concat_lastdim,
    constant,
    cross_entropy,
    detach,
    embedding_lookup,
    expand,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    mse_weighted,
    mul,
    reshape,
    scale,
    slice_axis,
    slice_rows,
    softmax_lastdim,
    sub,
    sum_all,
    transpose,
)
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    backward,
    clear_graph,
    graph_size,
    is_recording,
    no_grad,
)

__all__ = [
    "NumericError",
    "ShapeError",
    "Tensor",
    "add",
    "add_bias",
    "backward",
    "clear_graph",
    "concat",
    "concat_lastdim",
    "constant",
    "cross_entropy",
    "detach",
    "embedding_lookup",
    "expand",
    "gelu",
    "graph_size",
    "is_recording",
    "layer_norm",
    "masked_fill",
    "matmul",
    "mse_weighted",
    "mul",
    "no_grad",
    "reshape",
    "scale",
    "slice_axis",
    "slice_rows",
    "softmax_lastdim",
    "sub",
    "sum_all",
    "transpose",
]
