"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` is both the value container and the graph node: operations
record their parents and a backward closure, and :meth:`Tensor.backward`
walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

SPTT_MAGIC = b"SPTT"
SPTT_VERSION = 1


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph edges inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    pass


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float64)


class Tensor:
    """n-dimensional float array that optionally tracks gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_scale(self, other)

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


GraphNode = Tensor


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap an op result; attaches graph edges only when some parent needs gradients."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op!r}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def new_tensor(shape: Sequence[int], fill: str = "zeros", value: float = 0.0, seed: int | None = None,
               low: float = 0.0, high: float = 1.0, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Create a tensor filled with zeros, a constant, or seeded uniform noise."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif fill == "seeded-uniform":
        if seed is None:
            raise ValueError("seeded-uniform fill needs a seed")
        data = np.random.default_rng(seed).uniform(low, high, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown fill {fill!r}")
    return Tensor(data, requires_grad=requires_grad)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scalar_scale(x: Tensor, s: float) -> Tensor:
    s = x.dtype.type(s)
    return make_node(x.data * s, (x,), lambda g: (g * s,), "scale")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack [N, C_k, H, W] tensors along the channel axis in argument order."""
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: N/H/W mismatch {[q.shape for q in parts]}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_node(np.concatenate([p.data for p in parts], axis=1), parts, backward_fn, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """x[:, start:stop] for any tensor of rank >= 2."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"bad channel slice [{start}:{stop}] for {x.shape}")

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_node(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward_fn, "slice")


def tensor_sum(x: Tensor) -> Tensor:
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.full_like(x.data, g),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                     lambda g: (np.full_like(x.data, g / n),), "mean")


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(x * w) for a constant weight array; handy as a generic scalar probe."""
    w = np.asarray(w, dtype=x.dtype)
    if w.shape != x.shape:
        raise ValueError(f"weighted_sum: shape mismatch {x.shape} vs {w.shape}")
    return make_node(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), lambda g: (g * w,), "wsum")


def _target_array(pred: Tensor, target) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ValueError(f"loss: shape mismatch {pred.shape} vs {t.shape}")
    return t.astype(pred.dtype, copy=False)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at a tie is 0."""
    diff = pred.data - _target_array(pred, target)
    n = diff.size
    return make_node(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred,),
                     lambda g: (np.sign(diff) * (g / n),), "l1")


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred.data - _target_array(pred, target)
    n = diff.size
    return make_node(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,),
                     lambda g: (diff * (2 * g / n),), "mse")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            s = state.get(id(node))
            if s == 2:
                continue
            if s == 1:
                raise GraphError("cycle detected in computation graph")
            state[id(node)] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            ps = state.get(id(parent))
            if ps == 1:
                raise GraphError("cycle detected in computation graph")
            if ps is None and parent.requires_grad:
                stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every node of the graph that requires gradients.

    Fan-out contributions are summed. Gradients are never silently accumulated
    across calls: if any node already holds a gradient, this raises and the
    caller must zero gradients first.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires gradients")
    order = _topo_order(loss)
    for node in order:
        if node.grad is not None:
            raise GraphError("gradients already populated; zero them before calling backward again")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               wrt: Sequence[Tensor] = ()) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor. Extra leaf tensors in ``wrt`` (e.g.
    parameters closed over by ``f``) are checked as well. Everything must be
    64-bit.
    """
    targets = [x, *wrt]
    for t in targets:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit tensors")
    saved = [t.requires_grad for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(x)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
        backward(out)
        # a target the output does not depend on has an implicit zero gradient
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]
        worst = 0.0
        for t, ga in zip(targets, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + h
                    fp = f(x).item()
                    flat[i] = orig - h
                    fm = f(x).item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = gflat[i]
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for t, s in zip(targets, saved):
            t.requires_grad = s
            t.grad = None


def write_tensor(fh, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    fh.write(SPTT_MAGIC)
    fh.write(struct.pack("<IBI", SPTT_VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(fh) -> Tensor:
    magic = fh.read(4)
    if magic != SPTT_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<IBI", fh.read(9))
    if version != SPTT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if code not in DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dtype = np.dtype(DTYPES[code]).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("truncated tensor payload")
    data = np.frombuffer(raw, dtype=dtype).astype(DTYPES[code]).reshape(shape)
    return Tensor(data)


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
