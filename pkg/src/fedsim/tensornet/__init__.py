"""A small numpy/numba network stack with bit-stable reductions."""

from fedsim.tensornet.model import ForwardCache, forward, loss_and_grad, sgd_step, train_local
from fedsim.tensornet.params import (
    Layout,
    ModelKind,
    ModelParams,
    ModelSpec,
    init_params,
    layer_table,
    model_layout,
)

__all__ = [
    "ForwardCache",
    "Layout",
    "ModelKind",
    "ModelParams",
    "ModelSpec",
    "forward",
    "init_params",
    "layer_table",
    "loss_and_grad",
    "model_layout",
    "sgd_step",
    "train_local",
]
