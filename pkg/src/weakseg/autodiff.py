"""Define-by-run reverse-mode differentiation over dense numpy arrays.

Every operation that produces a :class:`Tensor` from tracked inputs records
its parents and a backward closure. :func:`backward` walks the recorded graph
in reverse topological order. Gradients accumulate and are never cleared
implicitly; call :meth:`Tensor.zero_grad` (or the optimizer's) between steps.

Set ``WEAKSEG_DEBUG=1`` to assert finiteness after every forward op.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = os.environ.get("WEAKSEG_DEBUG", "") not in ("", "0")

_ids = itertools.count()
_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph edges."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """An n-d array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op's output, recording it on the graph when any parent is tracked."""
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor(data)
    if not _recording:
        return out
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in sorted(node._parents, key=lambda t: t.node_id, reverse=True):
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise GraphError("loss is not attached to a recorded graph")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        # interior nodes keep their gradient too, handy for inspection
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in node._backward(g):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def tensor_new(shape: Sequence[int], init="zeros", *, value: float = 0.0, values=None,
               seed: int | None = None, std: float = 1.0, dtype=np.float64,
               requires_grad: bool = False) -> Tensor:
    """Create a tensor from a fill spec: ``"constant"``/``"zeros"``, ``"values"`` or ``"normal"``."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    n = int(np.prod(shape))
    if init in ("zeros", "constant"):
        data = np.full(shape, value if init == "constant" else 0.0, dtype=dtype)
    elif init == "values":
        flat = np.asarray(values, dtype=dtype).reshape(-1)
        if flat.size != n:
            raise ShapeError(f"expected {n} values for shape {shape}, got {flat.size}")
        data = flat.reshape(shape)
    elif init == "normal":
        rng = np.random.default_rng(seed)
        data = (rng.standard_normal(n) * std).astype(dtype).reshape(shape)
    else:
        raise ValueError(f"unknown fill spec {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def _scalar(b) -> float:
    if np.ndim(b) != 0:
        raise ShapeError("only scalar operands broadcast; wrap arrays in a Tensor of matching shape")
    return float(b)


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_result(a.data + _scalar(b), (a,), lambda g: ((a, g),))
    _same_shape(a, b)
    return make_result(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_result(a.data - _scalar(b), (a,), lambda g: ((a, g),))
    _same_shape(a, b)
    return make_result(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, b)
    _same_shape(a, b)
    return make_result(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = _scalar(s)
    return make_result(a.data * s, (a,), lambda g: ((a, g * s),))


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: ((a, 2.0 * a.data * g),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scalar-mul": scalar_mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    if kind == "square":
        return square(a)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b)


def sum_all(a: Tensor) -> Tensor:
    return make_result(np.asarray(a.data.sum()).reshape(()), (a,),
                       lambda g: ((a, np.broadcast_to(g, a.shape).copy()),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return make_result(np.asarray(a.data.mean()).reshape(()), (a,),
                       lambda g: ((a, np.full(a.shape, g / n, dtype=a.dtype)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(a.shape)),))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-4,
                      coords: Iterable[int] | None = None) -> float:
    """Max relative error between backprop and central differences of scalar ``f`` at ``x``.

    ``coords`` restricts the comparison to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = np.zeros(base.size) if probe.grad is None else probe.grad.reshape(-1)

    idx = range(base.size) if coords is None else coords
    worst = 0.0
    flat = base.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - step
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
