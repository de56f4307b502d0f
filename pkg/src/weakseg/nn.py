"""Layer vocabulary for the classifier and segmenter.

Functional ops take and return :class:`~weakseg.autodiff.Tensor` objects and
register their own backward rules. The small layer classes below only hold
parameters and running statistics.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from . import kernels
from .autodiff import ShapeError, Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_fmap(x: Tensor, what: str = "input") -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be [batch, channels, height, width], got {x.shape}")


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    _check_fmap(x)
    b, c, h, w = x.shape
    out_c, in_c = weight.shape[:2]
    if weight.shape[2:] != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {weight.shape[2:]}")
    if in_c != c:
        raise ShapeError(f"conv expects {in_c} input channels, got {c}")
    if padding == "same":
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    elif padding == "valid":
        if h < 3 or w < 3:
            raise ShapeError(f"valid convolution needs spatial dims >= 3, got {(h, w)}")
        xp = np.ascontiguousarray(x.data)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    cols = kernels.im2col3x3(xp)  # B, Ho, Wo, C*9
    ho, wo = cols.shape[1:3]
    cols2 = cols.reshape(-1, c * 9)
    wmat = weight.data.reshape(out_c, c * 9)
    out = (cols2 @ wmat.T + bias.data).reshape(b, ho, wo, out_c).transpose(0, 3, 1, 2)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
        dw = (g2.T @ cols2).reshape(weight.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, c * 9)
            dxp = kernels.col2im3x3(dcols, c)
            dx = dxp[:, :, 1:-1, 1:-1] if padding == "same" else dxp
        return ((x, dx), (weight, dw), (bias, db))

    return make_result(np.ascontiguousarray(out), (x, weight, bias), _backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization; updates ``running_mean``/``running_var`` in place when training."""
    _check_fmap(x)
    b, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batch norm expects {gamma.shape[0]} channels, got {c}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        count = b * h * w
        if count < 2:
            raise ShapeError("batch norm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        count = 0
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def _backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv.reshape(1, c, 1, 1) / count * (count * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv.reshape(1, c, 1, 1)
        return ((x, dx), (gamma, dgamma), (beta, dbeta))

    return make_result(out, (x, gamma, beta), _backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: ((x, g * pos),))


def maxpool2x2(x: Tensor) -> Tensor:
    _check_fmap(x)
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {(h, w)}")
    out, arg = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))
    return make_result(out, (x,), lambda g: ((x, kernels.maxpool2x2_backward(np.ascontiguousarray(g), arg)),))


@lru_cache(maxsize=None)
def _upsample_matrix(length: int, dtype_str: str) -> np.ndarray:
    """(2L, L) align-corners interpolation matrix."""
    out_len = 2 * length
    m = np.zeros((out_len, length), dtype=np.float64)
    for j in range(out_len):
        pos = j * (length - 1) / (out_len - 1)
        i0 = int(np.floor(pos))
        i1 = min(i0 + 1, length - 1)
        frac = pos - i0
        m[j, i0] += 1.0 - frac
        m[j, i1] += frac
    m.setflags(write=False)
    return m.astype(dtype_str)


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    _check_fmap(x)
    h, w = x.shape[2:]
    if h < 2 or w < 2:
        raise ShapeError(f"bilinear upsampling needs spatial dims >= 2, got {(h, w)}")
    uh = _upsample_matrix(h, x.dtype.str)
    uw = _upsample_matrix(w, x.dtype.str)
    out = uh @ x.data @ uw.T
    return make_result(out, (x,), lambda g: ((x, uh.T @ g @ uw),))


def global_avg_pool(x: Tensor) -> Tensor:
    _check_fmap(x)
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3))
    return make_result(out, (x,), lambda g: ((x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear layer expects [batch, {weight.shape[1]}], got {x.shape}")
    out = x.data @ weight.data.T + bias.data
    return make_result(out, (x, weight, bias),
                       lambda g: ((x, g @ weight.data), (weight, g.T @ x.data), (bias, g.sum(axis=0))))


def softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return make_result(p, (z,), lambda g: ((z, p * (g - (g * p).sum(axis=1, keepdims=True))),))


def linear_softmax(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return softmax(linear(x, weight, bias))


def sigmoid(x: Tensor) -> Tensor:
    """Branch-stable logistic; outputs are clamped to the open interval (0, 1)."""
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    info = np.finfo(x.dtype)
    s = np.clip(s, info.smallest_subnormal, np.nextafter(x.dtype.type(1), x.dtype.type(0)))
    return make_result(s, (x,), lambda g: ((x, g * s * (1.0 - s)),))


# -- parameter holders -------------------------------------------------------

def he_normal(shape: Sequence[int], fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    return (rng.standard_normal(tuple(shape)) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3x3:
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float64,
                 init_scale: float = 1.0):
        w = he_normal((out_ch, in_ch, 3, 3), in_ch * 9, rng, np.float64) * init_scale
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, padding: str = "same") -> Tensor:
        return conv3x3(x, self.weight, self.bias, padding)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class BatchNorm2d:
    def __init__(self, channels: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class Linear:
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = Tensor(he_normal((out_f, in_f), in_f, rng, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class ConvBNReLU:
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float64):
        self.conv = Conv3x3(in_ch, out_ch, rng, dtype)
        self.bn = BatchNorm2d(out_ch, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))

    def named_tensors(self, prefix: str):
        yield from self.conv.named_tensors(f"{prefix}.conv")
        yield from self.bn.named_tensors(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(f"{prefix}.bn")


def residual_block(x: Tensor, stages: Sequence[ConvBNReLU], training: bool) -> Tensor:
    """``x + branch(x)`` where the branch chains every conv-BN-ReLU stage."""
    _check_fmap(x)
    y = x
    for stage in stages:
        if stage.conv.weight.shape[0] != stage.conv.weight.shape[1]:
            raise ShapeError("residual block convolutions must keep the channel count")
        y = stage(y, training)
    return x + y


class ResidualBlock:
    def __init__(self, channels: int, n: int, rng: np.random.Generator, dtype=np.float64):
        self.stages = [ConvBNReLU(channels, channels, rng, dtype) for _ in range(n)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return residual_block(x, self.stages, training)

    def named_tensors(self, prefix: str):
        for i, s in enumerate(self.stages):
            yield from s.named_tensors(f"{prefix}.stage{i}")

    def named_buffers(self, prefix: str):
        for i, s in enumerate(self.stages):
            yield from s.named_buffers(f"{prefix}.stage{i}")
