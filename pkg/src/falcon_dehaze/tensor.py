"""Dense tensors with a reverse-mode gradient tape.

A ``Tensor`` wraps a numpy array. Operations on tensors that require
gradients record a ``Node`` holding the op kind, its inputs and a backward
closure; ``Tensor.backward`` replays those nodes in reverse topological order.

Complex tensors (FFT outputs) carry gradients in the convention
``dL/dRe + 1j * dL/dIm``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_state = threading.local()


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class StateError(RuntimeError):
    """Raised when an operation is invoked in an invalid state."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are cast to (used by gradient oracles)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Node:
    __slots__ = ("op", "inputs", "backward", "saved")

    def __init__(self, op: str, inputs: tuple, backward: Callable, saved: dict):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.saved = saved

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        dtype = get_default_dtype()
        if np.iscomplexobj(arr):
            arr = arr.astype(np.result_type(dtype, np.complex64), copy=False)
        else:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        op = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph -------------------------------------------------------------
    def _topo(self) -> list["Tensor"]:
        """Post-order of the recorded graph (inputs before consumers)."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in reversed(t.node.inputs):
                    if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return order

    def backward(self, grad=None) -> None:
        """Propagate gradients to every ``requires_grad`` leaf reachable from this tensor.

        Leaf ``grad`` buffers are overwritten, not accumulated, so replaying the
        same graph twice yields identical results.
        """
        if not self.requires_grad:
            raise StateError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in reversed(self._topo()):
            g = grads.pop(id(t), None)
            if t.node is None:
                if t.requires_grad:
                    t.grad = g if g is not None else np.zeros_like(t.data)
                continue
            if g is None:
                continue
            in_grads = t.node.backward(g)
            for p, pg in zip(t.node.inputs, in_grads):
                if pg is None or not (isinstance(p, Tensor) and p.requires_grad):
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def graph_ops(t: Tensor) -> list[str]:
    """Op kinds recorded on the tape behind ``t``, in forward order."""
    return [n.node.op for n in t._topo() if n.node is not None]


def record(data: np.ndarray, inputs: Sequence, op: str, backward: Callable, **saved) -> Tensor:
    """Wrap an op result, attaching a tape node when any input requires grad."""
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward, saved)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise DimensionError(f"{op}: axis {axis} mismatch ({x} vs {y})")
        raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return record(a.data + b, (a,), "add_scalar", lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")
    return record(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    a = as_tensor(a)
    _check_same(a, b, "sub")
    return record(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        s = b
        return record(a.data * s, (a,), "scale", lambda g: (g * s,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record(ad * ad, (a,), "square", lambda g: (2 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return record(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: (g * inside,))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = np.asarray(a.data.sum(dtype=dtype), dtype=dtype)
    return record(out, (a,), "sum", lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.data.size
    out = np.asarray(a.data.mean(dtype=dtype), dtype=dtype)
    return record(out, (a,), "mean", lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.shape
    return record(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(orig),))


def swap_last(a: Tensor) -> Tensor:
    return record(np.swapaxes(a.data, -1, -2), (a,), "transpose", lambda g: (np.swapaxes(g, -1, -2),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner axis mismatch ({a.shape[-1]} vs {b.shape[-2]})")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if _needs(a) else None
        gb = np.swapaxes(ad, -1, -2) @ g if _needs(b) else None
        return ga, gb

    return record(ad @ bd, (a, b), "matmul", backward)


# -- channel plumbing --------------------------------------------------------


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4:
            raise DimensionError("concat_channels expects rank-4 tensors")
        for axis in (0, 2, 3):
            if t.shape[axis] != ref[axis]:
                raise DimensionError(f"concat_channels: axis {axis} mismatch ({t.shape[axis]} vs {ref[axis]})")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return record(np.concatenate([t.data for t in tensors], axis=1), tensors, "concat", backward)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape, dtype = a.shape, a.dtype
    if not 0 <= start < stop <= shape[1]:
        raise DimensionError(f"slice_channels: range [{start}, {stop}) outside axis 1 of extent {shape[1]}")

    def backward(g):
        full = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        full[:, start:stop] = g
        return (full,)

    return record(a.data[:, start:stop], (a,), "slice", backward)


def split_channels(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != a.shape[1]:
        raise DimensionError(f"split_channels: sizes {list(sizes)} do not sum to axis 1 extent {a.shape[1]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_channels(a, start, start + s))
        start += s
    return out
