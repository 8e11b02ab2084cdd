"""Dense tensor kernels with hand-written backward passes.

A tensor is a plain ``numpy.ndarray``. Kernels keep the dtype of their inputs,
so the same code runs in float32 for training and float64 for gradient checks.
Every forward returns ``(output, cache)``; the matching backward consumes the
cache.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import defaults
from .common import DimensionError, InputError, NonFiniteError, UsageError

logger = logging.getLogger(__name__)

Tensor = np.ndarray


def check_finite(name: str, *arrays: Tensor):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
            raise NonFiniteError(
                f"{name}: {bad} non-finite value(s) in tensor of shape {a.shape}"
            )


def _require_cache(cache, op: str):
    if cache is None:
        raise UsageError(f"{op} backward called without a forward cache")


# convolution


@dataclass
class ConvCache:
    input_shape: tuple
    cols: Tensor
    weight: Tensor
    stride: int
    pad: int
    out_hw: tuple
    has_bias: bool


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    # floor convention: trailing rows a strided window cannot reach are dropped
    span = size + 2 * pad - k
    if span < 0:
        raise DimensionError(
            f"conv window k={k} pad={pad} larger than input size {size}"
        )
    return span // stride + 1


def conv2d_forward(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> tuple[Tensor, ConvCache]:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError("conv2d input/weight mismatch", x.shape, weight.shape)
    if stride < 1 or pad < 0:
        raise InputError(f"conv2d: invalid stride={stride} pad={pad}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError("conv2d bias mismatch", bias.shape, weight.shape)
    B, C, H, W = x.shape
    Cout, _, kH, kW = weight.shape
    Ho = conv_output_size(H, kH, stride, pad)
    Wo = conv_output_size(W, kW, stride, pad)

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows are (b, ho, wo); columns are (c, kh, kw), channel-major
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, C * kH * kW
    )
    out = cols @ weight.reshape(Cout, -1).T
    if bias is not None:
        out = out + bias
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    cache = ConvCache(x.shape, cols, weight, stride, pad, (Ho, Wo), bias is not None)
    return np.ascontiguousarray(out), cache


def conv2d_backward(
    grad_out: Tensor, cache: Optional[ConvCache]
) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    _require_cache(cache, "conv2d")
    B, C, H, W = cache.input_shape
    Cout, _, kH, kW = cache.weight.shape
    Ho, Wo = cache.out_hw
    if grad_out.shape != (B, Cout, Ho, Wo):
        raise DimensionError(
            "conv2d grad_out mismatch", grad_out.shape, (B, Cout, Ho, Wo)
        )
    s, pad = cache.stride, cache.pad

    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, Cout)
    grad_weight = (g.T @ cache.cols).reshape(cache.weight.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if cache.has_bias else None

    dcols = (g @ cache.weight.reshape(Cout, -1)).reshape(B, Ho, Wo, C, kH, kW)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=grad_out.dtype)
    for i in range(kH):
        for j in range(kW):
            dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    grad_input = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
    return np.ascontiguousarray(grad_input), grad_weight, grad_bias


# batch normalization


@dataclass
class BatchNormCache:
    x_hat: Tensor
    inv_std: Tensor
    gamma: Tensor
    train: bool


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    train: bool,
    momentum: float = defaults.bn_momentum,
    eps: float = defaults.bn_eps,
) -> tuple[Tensor, Tensor, Tensor, BatchNormCache]:
    """Returns ``(out, new_running_mean, new_running_var, cache)``.

    Running statistics are never modified in place.
    """
    if x.ndim != 4:
        raise DimensionError("batchnorm expects a 4-D input", x.shape)
    C = x.shape[1]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (C,):
            raise DimensionError("batchnorm channel mismatch", t.shape, x.shape)

    if train:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        unbiased = var * (n / (n - 1)) if n > 1 else var
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * unbiased
        new_mean = new_mean.astype(running_mean.dtype)
        new_var = new_var.astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
    return out, new_mean, new_var, BatchNormCache(x_hat, inv_std, gamma, train)


def batchnorm_backward(
    grad_out: Tensor, cache: Optional[BatchNormCache]
) -> tuple[Tensor, Tensor, Tensor]:
    _require_cache(cache, "batchnorm")
    if grad_out.shape != cache.x_hat.shape:
        raise DimensionError(
            "batchnorm grad_out mismatch", grad_out.shape, cache.x_hat.shape
        )
    x_hat = cache.x_hat
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dx_hat = grad_out * cache.gamma[None, :, None, None]
    scale = cache.inv_std[None, :, None, None]
    if not cache.train:
        return dx_hat * scale, grad_gamma, grad_beta

    n = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
    sum_dx = dx_hat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dx_xhat = (dx_hat * x_hat).sum(axis=(0, 2, 3))[None, :, None, None]
    grad_input = scale / n * (n * dx_hat - sum_dx - x_hat * sum_dx_xhat)
    return grad_input, grad_gamma, grad_beta


# activations and pooling


def relu_forward(x: Tensor) -> tuple[Tensor, Tensor]:
    # a comparison mask maps NaN to 0, so non-finite input has to be caught here
    check_finite("relu input", x)
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_backward(grad_out: Tensor, cache: Optional[Tensor]) -> Tensor:
    _require_cache(cache, "relu")
    return np.where(cache, grad_out, np.zeros((), dtype=grad_out.dtype))


@dataclass
class MaxPoolCache:
    input_shape: tuple
    argmax: Tensor


def maxpool2x2_forward(x: Tensor) -> tuple[Tensor, MaxPoolCache]:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError("maxpool2x2 needs even spatial dims", x.shape)
    B, C, H, W = x.shape
    windows = (
        x.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H // 2, W // 2, 4)
    )
    # ties resolve to the first position in row-major window order
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, MaxPoolCache(x.shape, argmax)


def maxpool2x2_backward(grad_out: Tensor, cache: Optional[MaxPoolCache]) -> Tensor:
    _require_cache(cache, "maxpool2x2")
    B, C, H, W = cache.input_shape
    if grad_out.shape != (B, C, H // 2, W // 2):
        raise DimensionError(
            "maxpool2x2 grad_out mismatch", grad_out.shape, (B, C, H // 2, W // 2)
        )
    windows = np.zeros((B, C, H // 2, W // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(windows, cache.argmax[..., None], grad_out[..., None], axis=-1)
    return (
        windows.reshape(B, C, H // 2, W // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H, W)
    )


def global_avg_pool_forward(x: Tensor) -> tuple[Tensor, tuple]:
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects a 4-D input", x.shape)
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(grad_out: Tensor, cache: Optional[tuple]) -> Tensor:
    _require_cache(cache, "global_avg_pool")
    B, C, H, W = cache
    if grad_out.shape != (B, C):
        raise DimensionError("global_avg_pool grad_out mismatch", grad_out.shape, (B, C))
    g = grad_out / (H * W)
    return np.broadcast_to(g[:, :, None, None], cache).astype(grad_out.dtype)


@dataclass
class LinearCache:
    x: Tensor
    weight: Tensor
    has_bias: bool


def linear_forward(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None
) -> tuple[Tensor, LinearCache]:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError("linear input/weight mismatch", x.shape, weight.shape)
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, LinearCache(x, weight, bias is not None)


def linear_backward(
    grad_out: Tensor, cache: Optional[LinearCache]
) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    _require_cache(cache, "linear")
    grad_input = grad_out @ cache.weight
    grad_weight = grad_out.T @ cache.x
    grad_bias = grad_out.sum(axis=0) if cache.has_bias else None
    return grad_input, grad_weight, grad_bias


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross-entropy logits/labels mismatch", logits.shape, labels.shape)
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"label out of range [0, {K}): {labels.min()}..{labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    B = logits.shape[0]
    rows = np.arange(B)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    return loss, (grad / B).astype(logits.dtype)


# optimizer


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = defaults.momentum
    weight_decay: float = defaults.weight_decay
    velocity: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError(f"learning_rate must be positive: {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise InputError(f"momentum must be in [0, 1): {self.momentum}")
        if self.weight_decay < 0:
            raise InputError(f"weight_decay must be >= 0: {self.weight_decay}")


def sgd_step(
    params: dict[str, Tensor], grads: dict[str, Tensor], state: SgdState
) -> dict[str, Tensor]:
    """Momentum SGD with L2 decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

    Returns new parameter arrays; ``state.velocity`` is advanced.
    """
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient for {', '.join(sorted(bad))}")

    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape for {name}", g.shape, p.shape)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise DimensionError(f"velocity shape for {name}", v.shape, p.shape)
        dtype = p.dtype
        v = (state.momentum * v + g + state.weight_decay * p).astype(dtype)
        state.velocity[name] = v
        updated[name] = (p - state.learning_rate * v).astype(dtype)
    return updated


def step_learning_rate(
    base_lr: float,
    epoch: int,
    total_epochs: int,
    drop_points=defaults.lr_drop_points,
    factor: float = defaults.lr_drop_factor,
) -> float:
    """Step schedule: multiply by ``factor`` once each drop point is passed."""
    drops = sum(1 for p in drop_points if epoch >= int(round(p * total_epochs)))
    return base_lr * factor**drops
