"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its inputs and a backward closure. ``backward``
orders the reachable graph topologically (the tape) and walks it once in
reverse, accumulating gradients additively into every leaf that requires them.

Binary elementwise ops only broadcast over *leading* axes: after dropping
leading unit axes, the smaller operand's shape must equal a suffix of the
larger one. Anything else is rejected instead of silently expanded.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True

# tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer steps)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)  # always copies; no shared views
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if len(a) == len(b) and math.prod(a) < math.prod(b):
        big, small = b, a
    core = small
    while core and core[0] == 1:
        core = core[1:]
    if len(core) <= len(big) and big[len(big) - len(core):] == core:
        return big
    raise ShapeError(f"incompatible broadcast between shapes {a} and {b} (only leading axes may broadcast)")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    core = shape
    while core and core[0] == 1:
        core = core[1:]
    lead = grad.ndim - len(core)
    g = grad.sum(axis=tuple(range(lead))) if lead else grad
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._wrap(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._wrap(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    def bw(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._wrap(a.data * c, (a,), lambda g: (g * c,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    inner = GELU_C * x * (1.0 + GELU_A * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor._wrap(out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return Tensor._wrap(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def tanh(a: Tensor) -> Tensor:
    th = np.tanh(a.data)
    return Tensor._wrap(th, (a,), lambda g: (g * (1.0 - th * th),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "gelu": gelu, "silu": silu, "tanh": tanh}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a python float as ``b``."""
    if op_kind == "scale":
        return scale(as_tensor(a), float(b))
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("gelu", "silu", "tanh"):
        return fn(as_tensor(a))
    if b is None:
        raise ValueError(f"{op_kind} needs two operands")
    return fn(a, b)


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return Tensor._wrap(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return Tensor._wrap(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._wrap(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._wrap(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def take(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis`` (copied)."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return Tensor._wrap(a.data[index].copy(), (a,), bw)


def split(a: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    axis = axis % a.ndim
    step = a.shape[axis] // n
    if step * n != a.shape[axis]:
        raise ShapeError(f"cannot split axis of extent {a.shape[axis]} into {n}")
    return [take(a, i * step, (i + 1) * step, axis) for i in range(n)]


def lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._wrap(table.data[ids].copy(), (table,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands or equal leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd.T
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))
    xshape = xd.shape

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xshape) if x.requires_grad else None
        gw = g2.T @ flat if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._wrap(out, parents, bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(y, (a,), bw)


LAYERNORM_EPS = 1e-6


def layernorm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then optional affine ``gain * xhat + bias``."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return grads

    parents = (a,) + tuple(p for p in (gain, bias) if p is not None)
    return Tensor._wrap(out, parents, bw)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; ``target`` may be a Tensor (differentiable) or an array."""
    tgt = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt.data
    n = diff.size
    return Tensor._wrap(np.array((diff * diff).mean()), (pred, tgt),
                        lambda g: (g * 2.0 / n * diff, g * -2.0 / n * diff))


# ---------------------------------------------------------------- backward


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple[int, tuple[int, ...]] | None  # (input index, coordinate)
    analytic: float
    numeric: float
    n_checked: int

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        where = f" worst input={self.worst[0]} coord={self.worst[1]}" if self.worst else ""
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e} over {self.n_checked} coords;"
                f"{where} analytic={self.analytic:.6e} numeric={self.numeric:.6e}")


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps O(h^2) truncation error (~1e-10 absolute) from dominating coordinates
    whose true gradient is itself near zero. When
    ``max_coords`` is set, that many coordinates per input are drawn at random.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.grad = None
    loss = f(*inputs) if not isinstance(x, Tensor) else f(x)
    if loss.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> float:
        with no_grad():
            out = f(*inputs) if not isinstance(x, Tensor) else f(x)
        return float(out.data)

    rng = rng or np.random.default_rng(0)
    worst_err, worst, worst_pair, n_checked = 0.0, None, (0.0, 0.0), 0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            fp = evaluate()
            flat[j] = orig - h
            fm = evaluate()
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[i].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            n_checked += 1
            if err > worst_err or worst is None:
                worst_err, worst, worst_pair = err, (i, np.unravel_index(j, t.shape)), (ana, num)
    worst_coord = None if worst is None else (worst[0], tuple(int(v) for v in worst[1]))
    return GradCheckReport(worst_err, worst_err < tol, worst_coord, float(worst_pair[0]), float(worst_pair[1]), n_checked)
