from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedsim.datahub import Dataset, augment
from fedsim.rngkit import RngStream, RngStreamSuite
from fedsim.tensornet import kernels as K
from fedsim.tensornet.params import ModelKind, ModelParams, ModelSpec


@dataclass
class ForwardCache:
    """Activations kept by :func:`forward` for the backward pass."""

    batch: np.ndarray
    acts: dict[str, np.ndarray] = field(default_factory=dict)


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> None:
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ValueError(
            f"batch shape {list(batch.shape)} does not match [B, {', '.join(map(str, spec.input_shape))}]"
        )


def forward(
    spec: ModelSpec,
    params: ModelParams,
    batch: np.ndarray,
    dropout_stream: RngStream | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Logits for ``batch``; dropout is active only when a stream is given.

    Computation runs in the dtype of ``params``.  Dropout consumes one
    uniform per hidden unit per sample.
    """
    _check_batch(spec, batch)
    dtype = params.values.dtype
    x = np.ascontiguousarray(batch, dtype=dtype)
    cache = ForwardCache(batch=x)
    a = cache.acts
    if spec.kind is ModelKind.SMALL_CNN:
        a["conv1"] = K.conv2d_forward(x, params["conv1.weight"], params["conv1.bias"])
        a["relu1"] = K.relu_forward(a["conv1"])
        a["pool1"], a["arg1"] = K.maxpool2_forward(a["relu1"])
        a["conv2"] = K.conv2d_forward(a["pool1"], params["conv2.weight"], params["conv2.bias"])
        a["relu2"] = K.relu_forward(a["conv2"])
        a["pool2"], a["arg2"] = K.maxpool2_forward(a["relu2"])
        a["flat"] = a["pool2"].reshape(x.shape[0], -1)
        logits = K.dense_forward(a["flat"], params["fc.weight"], params["fc.bias"])
        return logits, cache

    a["flat"] = x.reshape(x.shape[0], -1)
    a["fc1"] = K.dense_forward(a["flat"], params["fc1.weight"], params["fc1.bias"])
    h = K.relu_forward(a["fc1"])
    if dropout_stream is not None and spec.dropout_rate > 0.0:
        u = dropout_stream.uniforms(h.size).reshape(h.shape)
        h, a["mask"] = K.dropout_forward(h, u, spec.dropout_rate)
    a["hidden"] = h
    logits = K.dense_forward(h, params["fc2.weight"], params["fc2.bias"])
    return logits, cache


def _check_labels(spec: ModelSpec, labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.n_classes):
        raise ValueError(f"labels must lie in [0, {spec.n_classes})")
    return labels


def loss_and_grad(
    spec: ModelSpec,
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    dropout_stream: RngStream | None = None,
) -> tuple[float, ModelParams]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    labels = _check_labels(spec, labels, batch.shape[0])
    logits, cache = forward(spec, params, batch, dropout_stream)
    losses, g = K.softmax_xent(logits, labels)
    loss = K.ordered_sum(losses) / len(losses)
    grad = ModelParams.zeros(params.layout, dtype=params.values.dtype)
    a = cache.acts

    if spec.kind is ModelKind.SMALL_CNN:
        g = K.dense_backward(a["flat"], params["fc.weight"], g, grad["fc.weight"], grad["fc.bias"], True)
        g = g.reshape(a["pool2"].shape)
        g = K.maxpool2_backward(g, a["arg2"], *a["relu2"].shape[2:])
        g = K.relu_backward(a["conv2"], g)
        g = K.conv2d_backward(
            a["pool1"], params["conv2.weight"], g, grad["conv2.weight"], grad["conv2.bias"], True
        )
        g = K.maxpool2_backward(g, a["arg1"], *a["relu1"].shape[2:])
        g = K.relu_backward(a["conv1"], g)
        K.conv2d_backward(
            cache.batch, params["conv1.weight"], g, grad["conv1.weight"], grad["conv1.bias"], False
        )
        return float(loss), grad

    g = K.dense_backward(a["hidden"], params["fc2.weight"], g, grad["fc2.weight"], grad["fc2.bias"], True)
    if "mask" in a:
        g = g * a["mask"]
    g = K.relu_backward(a["fc1"], g)
    K.dense_backward(a["flat"], params["fc1.weight"], g, grad["fc1.weight"], grad["fc1.bias"], False)
    return float(loss), grad


def sgd_step(params: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
    if params.layout != grad.layout:
        raise ValueError("gradient layout does not match parameter layout")
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    dtype = params.values.dtype
    step = dtype.type(lr) * grad.values.astype(dtype, copy=False)
    return ModelParams(params.layout, params.values - step)


def train_local(
    spec: ModelSpec,
    params: ModelParams,
    data: Dataset,
    epochs: int,
    batch_size: int,
    lr: float,
    suite: RngStreamSuite,
    use_augment: bool = False,
) -> tuple[ModelParams, int, float]:
    """Local SGD; returns ``(params, sample_count, mean final-epoch loss)``.

    Each epoch reshuffles with ``suite.shuffle``; a trailing partial batch is
    kept.  The loss is NaN when ``epochs`` is 0.
    """
    n = len(data)
    if n == 0:
        raise ValueError("client data is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    current = params.copy()
    epoch_loss = float("nan")
    for _ in range(epochs):
        order = suite.shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = data.images[idx]
            if use_augment:
                x = augment(x, suite.augment)
            loss, grad = loss_and_grad(spec, current, x, data.labels[idx], suite.dropout)
            current = sgd_step(current, grad, lr)
            total += loss * len(idx)
        epoch_loss = total / n
    return current, n, epoch_loss
