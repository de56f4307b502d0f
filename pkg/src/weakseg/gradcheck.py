"""Finite-difference checks for every differentiable op and the full segmenter.

Each layer check projects the op's output onto a fixed random tensor so that
all gradient coordinates are O(1); raw ``sum`` would leave many near zero and
make relative errors meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .autodiff import Tensor, backward, finite_diff_check, mean_all, mul, scalar_mul, square, sub, sum_all
from .models import ModelConfig, build_segmenter, spatial_mean
from .training import cross_entropy_loss, weak_label_loss

LAYER_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _proj(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Values in random order whose pairwise gaps exceed any probing step."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n - 0.5) + rng.uniform(-1e-3, 1e-3, size=shape)


def layer_checks(seed: int = 0, step: float = 1e-4) -> list[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, Callable[[], float]]] = []

    def add(name, f, x):
        checks.append((name, lambda f=f, x=x: finite_diff_check(f, Tensor(x), step)))

    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 3))
    r = rng.standard_normal((2, 3))
    add("add", lambda t: _proj(t + Tensor(b), r), a)
    add("sub", lambda t: _proj(sub(Tensor(b), t), r), a)
    add("mul", lambda t: _proj(mul(t, Tensor(b)), r), a)
    add("scalar-mul", lambda t: _proj(scalar_mul(t, 2.5), r), a)
    add("square", lambda t: _proj(square(t), r), a)
    add("mean", lambda t: mean_all(mul(t, Tensor(r))), a)

    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.3
    bias = rng.standard_normal(3)
    r5 = rng.standard_normal((2, 3, 5, 5))
    r3 = rng.standard_normal((2, 3, 3, 3))
    add("conv3x3[input]", lambda t: _proj(nn.conv3x3(t, Tensor(w), Tensor(bias)), r5), x)
    add("conv3x3[weight]", lambda t: _proj(nn.conv3x3(Tensor(x), t, Tensor(bias)), r5), w)
    add("conv3x3[bias]", lambda t: _proj(nn.conv3x3(Tensor(x), Tensor(w), t), r5), bias)
    add("conv3x3-valid[input]", lambda t: _proj(nn.conv3x3(t, Tensor(w), Tensor(bias), "valid"), r3), x)

    xb = rng.standard_normal((2, 3, 4, 4)) * 2.0 + 1.0
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    rb = rng.standard_normal((2, 3, 4, 4))

    def bn(t, g=gamma, bt=beta, training=True):
        return nn.batch_norm(t, g if isinstance(g, Tensor) else Tensor(g), bt if isinstance(bt, Tensor) else Tensor(bt),
                             np.zeros(3), np.ones(3), training)

    add("batch_norm[input,train]", lambda t: _proj(bn(t), rb), xb)
    add("batch_norm[gamma,train]", lambda t: _proj(bn(Tensor(xb), g=t), rb), gamma)
    add("batch_norm[beta,train]", lambda t: _proj(bn(Tensor(xb), bt=t), rb), beta)
    add("batch_norm[input,eval]", lambda t: _proj(bn(t, training=False), rb), xb)

    add("relu", lambda t: _proj(nn.relu(t), rb), _away_from_zero(rng, (2, 3, 4, 4)))
    rp = rng.standard_normal((1, 2, 3, 3))
    add("maxpool2x2", lambda t: _proj(nn.maxpool2x2(t), rp), _distinct(rng, (1, 2, 6, 6)))
    ru = rng.standard_normal((1, 2, 6, 8))
    add("bilinear_upsample_x2", lambda t: _proj(nn.bilinear_upsample_x2(t), ru), rng.standard_normal((1, 2, 3, 4)))
    rg = rng.standard_normal((2, 3))
    add("global_avg_pool", lambda t: _proj(nn.global_avg_pool(t), rg), rng.standard_normal((2, 3, 4, 4)))

    feats = rng.standard_normal((3, 4))
    lw = rng.standard_normal((5, 4)) * 0.5
    lb = rng.standard_normal(5) * 0.1
    rs = rng.standard_normal((3, 5))
    add("linear_softmax[input]", lambda t: _proj(nn.linear_softmax(t, Tensor(lw), Tensor(lb)), rs), feats)
    add("linear_softmax[weight]", lambda t: _proj(nn.linear_softmax(Tensor(feats), t, Tensor(lb)), rs), lw)
    add("sigmoid", lambda t: _proj(nn.sigmoid(t), rb), rng.standard_normal((2, 3, 4, 4)) * 3.0)

    block = nn.ResidualBlock(3, 2, np.random.default_rng(seed + 1))
    for stage in block.stages:
        stage.bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
        stage.bn.beta.data[:] = rng.uniform(0.2, 0.6, 3)  # keep ReLU inputs off the kink
    add("residual_block", lambda t: _proj(block(t, training=True), rb), rng.standard_normal((2, 3, 4, 4)))

    rm = rng.standard_normal(2)
    add("spatial_mean", lambda t: _proj(spatial_mean(t), rm), rng.uniform(0, 1, (2, 1, 4, 4)))

    probs = 0.5 * rng.dirichlet(np.ones(4), size=3) + 0.125  # -log p is too curved near 0 for step 1e-4
    labels = np.array([0, 3, 1])
    add("cross_entropy_loss", lambda t: cross_entropy_loss(t, labels), probs)
    targets = np.array([0.2, 0.7])
    add("weak_label_loss", lambda t: weak_label_loss(t, targets), rng.uniform(0, 1, (2, 1, 4, 4)))
    return checks


def segmenter_check(seed: int = 0, step: float = 1e-6, training: bool = False) -> float:
    """Max relative error of d(weighted spatial mean)/d(every parameter) for a d=1 segmenter on 16x16.

    In train mode the conv biases directly ahead of a batch norm have an
    exactly-zero gradient and are skipped; eval mode covers them.
    """
    cfg = ModelConfig(c=3, d=1, n=1, N=1, num_classes=2, input_size=(16, 16))
    model = build_segmenter(cfg, seed=seed)
    rng = np.random.default_rng(seed + 7)
    for name, buf in model.named_buffers():
        if name.endswith("running_mean"):
            buf[:] = rng.standard_normal(buf.shape) * 0.1
        else:
            buf[:] = rng.uniform(0.5, 1.5, buf.shape)
    x = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)))
    weights = rng.standard_normal(2)
    saved = {n: b.copy() for n, b in model.named_buffers()}

    def objective() -> Tensor:
        # train-mode BN mutates running stats; restore so every call sees the same model
        for n, b in model.named_buffers():
            b[:] = saved[n]
        return _proj(spatial_mean(model(x, training=training)), weights)

    model.zero_grad()
    backward(objective())
    worst = 0.0
    for name, p in model.named_parameters():
        if training and name.endswith("conv.bias"):
            continue
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(objective().data)
            flat[i] = orig - step
            fm = float(objective().data)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = float(analytic[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-12))
    return worst


def run_all(seed: int = 0, layer_tol: float = LAYER_TOL, model_tol: float = MODEL_TOL) -> list[CheckResult]:
    results = [CheckResult(name, fn(), layer_tol) for name, fn in layer_checks(seed)]
    results.append(CheckResult("segmenter[eval]", segmenter_check(seed, training=False), model_tol))
    results.append(CheckResult("segmenter[train]", segmenter_check(seed, training=True), model_tol))
    return results
