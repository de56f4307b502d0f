"""Pure-numpy reference kernels."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64_block(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the SplitMix64 stream seeded with ``seed``."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + idx * GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def box_blur(field: np.ndarray, passes: int) -> np.ndarray:
    out = np.array(field, dtype=np.float64, copy=True)
    for _ in range(passes):
        p = np.concatenate([out[:, :1], out, out[:, -1:]], axis=1)
        out = (p[:, :-2] + p[:, 1:-1] + p[:, 2:]) / 3.0
        p = np.concatenate([out[:1], out, out[-1:]], axis=0)
        out = (p[:-2] + p[1:-1] + p[2:]) / 3.0
    return out


def im2col3x3(xpad: np.ndarray) -> np.ndarray:
    """(B, C, H+2, W+2) padded input -> (B, H, W, C*9) patch matrix."""
    win = sliding_window_view(xpad, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    b, c, h, w = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h, w, c * 9)


def col2im3x3(dcols: np.ndarray, channels: int) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`; returns the padded-input gradient."""
    b, h, w, _ = dcols.shape
    d = dcols.reshape(b, h, w, channels, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, channels, h + 2, w + 2), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            out[:, :, ky:ky + h, kx:kx + w] += d[:, :, ky, kx]
    return out


def maxpool2x2_forward(x: np.ndarray):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool2x2_backward(grad: np.ndarray, arg: np.ndarray) -> np.ndarray:
    b, c, h2, w2 = grad.shape
    onehot = np.zeros((b, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(onehot, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    return onehot.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2 * 2, w2 * 2)
