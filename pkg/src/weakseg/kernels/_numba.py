"""numba-compiled kernels; same contracts as the numpy versions."""

import numpy as np
from numba import njit

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _splitmix64_block(seed, start, count):
    out = np.empty(count, dtype=np.uint64)
    z0 = np.uint64(seed)
    for i in range(count):
        z = z0 + np.uint64(start + i + 1) * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        out[i] = z ^ (z >> np.uint64(31))
    return out


def splitmix64_block(seed: int, start: int, count: int) -> np.ndarray:
    return _splitmix64_block(np.uint64(seed), start, count)


@njit(cache=True)
def _box_blur(field, passes):
    h, w = field.shape
    out = field.copy()
    tmp = np.empty_like(out)
    for _ in range(passes):
        for i in range(h):
            for j in range(w):
                a = out[i, j - 1] if j > 0 else out[i, 0]
                c = out[i, j + 1] if j < w - 1 else out[i, w - 1]
                tmp[i, j] = (a + out[i, j] + c) / 3.0
        for i in range(h):
            up = i - 1 if i > 0 else 0
            dn = i + 1 if i < h - 1 else h - 1
            for j in range(w):
                out[i, j] = (tmp[up, j] + tmp[i, j] + tmp[dn, j]) / 3.0
    return out


def box_blur(field: np.ndarray, passes: int) -> np.ndarray:
    return _box_blur(np.ascontiguousarray(field, dtype=np.float64), passes)


@njit(cache=True)
def im2col3x3(xpad):
    b, c, hp, wp = xpad.shape
    h, w = hp - 2, wp - 2
    out = np.empty((b, h, w, c * 9), dtype=xpad.dtype)
    for n in range(b):
        for i in range(h):
            for j in range(w):
                k = 0
                for ch in range(c):
                    for ky in range(3):
                        for kx in range(3):
                            out[n, i, j, k] = xpad[n, ch, i + ky, j + kx]
                            k += 1
    return out


@njit(cache=True)
def col2im3x3(dcols, channels):
    b, h, w, _ = dcols.shape
    out = np.zeros((b, channels, h + 2, w + 2), dtype=dcols.dtype)
    for n in range(b):
        for ch in range(channels):
            for ky in range(3):
                for kx in range(3):
                    k = ch * 9 + ky * 3 + kx
                    for i in range(h):
                        for j in range(w):
                            out[n, ch, i + ky, j + kx] += dcols[n, i, j, k]
    return out


@njit(cache=True)
def maxpool2x2_forward(x):
    b, c, h, w = x.shape
    out = np.empty((b, c, h // 2, w // 2), dtype=x.dtype)
    arg = np.empty((b, c, h // 2, w // 2), dtype=np.int8)
    for n in range(b):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best = x[n, ch, 2 * i, 2 * j]
                    k = 0
                    for q in range(1, 4):
                        v = x[n, ch, 2 * i + q // 2, 2 * j + q % 2]
                        if v > best:
                            best = v
                            k = q
                    out[n, ch, i, j] = best
                    arg[n, ch, i, j] = k
    return out, arg


@njit(cache=True)
def maxpool2x2_backward(grad, arg):
    b, c, h2, w2 = grad.shape
    out = np.zeros((b, c, h2 * 2, w2 * 2), dtype=grad.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(h2):
                for j in range(w2):
                    q = arg[n, ch, i, j]
                    out[n, ch, 2 * i + q // 2, 2 * j + q % 2] = grad[n, ch, i, j]
    return out
