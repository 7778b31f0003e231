from .tensor import (
    Tensor, param, const, add, sub, mul, div, neg, matmul,
    concat_last, concat_rows, slice_axis, tsum, tmean, softmax,
    layer_norm, relu, softplus, exp, log, gather_rows, scatter_add_rows,
    transpose, reshape, expand_leading, backward,
)
from .optim import Adam, adam_step
from .checkpoint import save_checkpoint, load_checkpoint, FORMAT_VERSION
