"""Reverse-mode differentiation over small dense float64 tensors.

Every primitive is a pair of functions: a forward map on numpy arrays and a
vector-Jacobian product. When a :class:`Tape` is active, each primitive call
whose inputs need gradients appends a node to it; :func:`backward` walks the
nodes in reverse. Without an active tape the primitives just compute values,
which is what inference uses.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

MASK_SCORE = -1e30


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        # extended precision passes through untouched (finite-difference oracle)
        self.data = data if data.dtype == np.longdouble else data.astype(np.float64, copy=False)
        if self.data.ndim > 3:
            raise ShapeError(f"rank {self.data.ndim} tensors are not supported")
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        if isinstance(key, slice):
            return slice_(self, key.start or 0, len(self) if key.stop is None else key.stop)
        return take(self, int(key))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "out", "inputs", "fwd", "vjp", "kwargs")

    def __init__(self, op, out, inputs, fwd, vjp, kwargs):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.fwd = fwd
        self.vjp = vjp
        self.kwargs = kwargs


class Tape:
    """Ordered record of primitive calls made while the tape is active.

    Use as a context manager; tapes nest, the innermost one records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> None:
        """Recompute every recorded output in order from the current inputs."""
        for node in self.nodes:
            node.out.data = node.fwd(*(t.data for t in node.inputs), **node.kwargs)


def active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def apply(op: str, fwd: Callable, vjp: Callable, *inputs, **kwargs) -> Tensor:
    ts = tuple(as_tensor(x) for x in inputs)
    out = Tensor(fwd(*(t.data for t in ts), **kwargs))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in ts):
        out.requires_grad = True
        tape.nodes.append(Node(op, out, ts, fwd, vjp, kwargs))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# --- elementwise ---------------------------------------------------------

def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b


def add(a, b) -> Tensor:
    return apply("add", _add_fwd,
                 lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                 a, b)


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b


def sub(a, b) -> Tensor:
    return apply("sub", _sub_fwd,
                 lambda g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
                 a, b)


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b


def mul(a, b) -> Tensor:
    return apply("mul", _mul_fwd,
                 lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
                 a, b)


def _div_fwd(a, b):
    _check_broadcast("div", a, b)
    return a / b


def div(a, b) -> Tensor:
    return apply("div", _div_fwd,
                 lambda g, out, a, b: (_unbroadcast(g / b, a.shape),
                                       _unbroadcast(-g * out / b, b.shape)),
                 a, b)


def neg(a) -> Tensor:
    return apply("neg", np.negative, lambda g, out, a: (-g,), a)


def _sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    return apply("sigmoid", _sigmoid, lambda g, out, x: (g * out * (1.0 - out),), x)


def tanh(x) -> Tensor:
    return apply("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),), x)


def softplus(x) -> Tensor:
    return apply("softplus", lambda x: np.logaddexp(0.0, x),
                 lambda g, out, x: (g * _sigmoid(x),), x)


def exp(x) -> Tensor:
    return apply("exp", np.exp, lambda g, out, x: (g * out,), x)


def log(x) -> Tensor:
    return apply("log", np.log, lambda g, out, x: (g / x,), x)


def sqrt(x) -> Tensor:
    return apply("sqrt", np.sqrt, lambda g, out, x: (g * 0.5 / out,), x)


def dropout(x, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed (already rescaled) mask; the mask is a constant."""
    mask = np.asarray(mask, dtype=np.float64)

    def fwd(x, mask=mask):
        if x.shape != mask.shape:
            raise ShapeError(f"dropout: shapes {x.shape} and {mask.shape} do not conform")
        return x * mask

    return apply("dropout", fwd, lambda g, out, x: (g * mask,), x)


# --- reductions and normalizers --------------------------------------------

def sum_(x) -> Tensor:
    return apply("sum", lambda x: np.asarray(x.sum()),
                 lambda g, out, x: (np.full(x.shape, float(g)),), x)


def sumsq(x) -> Tensor:
    return apply("sumsq", lambda x: np.asarray(np.dot(x.ravel(), x.ravel())),
                 lambda g, out, x: (2.0 * float(g) * x,), x)


def _norm_vjp(g, out, x):
    n = float(out)
    return (np.zeros_like(x) if n == 0.0 else float(g) * x / n,)


def norm(x) -> Tensor:
    """Euclidean norm of a vector."""
    def fwd(x):
        if x.ndim != 1:
            raise ShapeError(f"norm: expected a vector, got shape {x.shape}")
        return np.sqrt(np.dot(x, x))

    return apply("norm", fwd, _norm_vjp, x)


def row_norms(x) -> Tensor:
    def fwd(x):
        if x.ndim != 2:
            raise ShapeError(f"row_norms: expected a matrix, got shape {x.shape}")
        return np.sqrt(np.einsum("ij,ij->i", x, x))

    def vjp(g, out, x):
        safe = np.where(out == 0.0, 1.0, out)
        return (np.where(out[:, None] == 0.0, 0.0, (g / safe)[:, None] * x),)

    return apply("row_norms", fwd, vjp, x)


def _softmax_fwd(x, mask=None):
    if x.ndim != 1:
        raise ShapeError(f"softmax: expected a vector, got shape {x.shape}")
    if mask is not None:
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: shapes {x.shape} and {mask.shape} do not conform")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over a vector; entries where ``mask`` is False get exactly 0."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)

    def vjp(g, out, x, mask=None):
        return (out * (g - np.dot(g, out)),)

    return apply("softmax", _softmax_fwd, vjp, x, mask=mask)


def _log_softmax_fwd(x, mask=None):
    if x.ndim != 1:
        raise ShapeError(f"log_softmax: expected a vector, got shape {x.shape}")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def log_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)

    def vjp(g, out, x, mask=None):
        p = np.exp(out)
        gz = np.where(np.isfinite(out), g, 0.0)
        return (gz - p * gz.sum(),)

    return apply("log_softmax", _log_softmax_fwd, vjp, x, mask=mask)


# --- linear algebra ----------------------------------------------------------

def _matmul_fwd(a, b):
    ok = a.ndim in (1, 2) and b.ndim in (1, 2) and a.shape[-1] == b.shape[0]
    if not ok:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b


def _matmul_vjp(g, out, a, b):
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    if a.ndim == 1 and b.ndim == 1:
        return float(g) * b, float(g) * a
    return g @ b.T, a.T @ g


def matmul(a, b) -> Tensor:
    """Matrix/vector product for 1-D and 2-D operands (no batching)."""
    return apply("matmul", _matmul_fwd, _matmul_vjp, a, b)


def matvec(w, x) -> Tensor:
    return matmul(w, x)


def outer(u, v) -> Tensor:
    def fwd(u, v):
        if u.ndim != 1 or v.ndim != 1:
            raise ShapeError(f"outer: expected vectors, got shapes {u.shape} and {v.shape}")
        return np.outer(u, v)

    return apply("outer", fwd, lambda g, out, u, v: (g @ v, u @ g), u, v)


def transpose(x) -> Tensor:
    return apply("transpose", lambda x: x.T.copy(), lambda g, out, x: (g.T,), x)


# --- structural ---------------------------------------------------------------

def concat(parts: Sequence) -> Tensor:
    """Concatenate vectors end to end."""
    def fwd(*xs):
        for x in xs:
            if x.ndim != 1:
                raise ShapeError(f"concat: expected vectors, got shape {x.shape}")
        return np.concatenate(xs)

    def vjp(g, out, *xs):
        bounds = np.cumsum([0] + [len(x) for x in xs])
        return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return apply("concat", fwd, vjp, *parts)


def slice_(x, start: int, stop: int) -> Tensor:
    def fwd(x, start=start, stop=stop):
        if not 0 <= start < stop <= len(x):
            raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {x.shape}")
        return x[start:stop].copy()

    def vjp(g, out, x, start=start, stop=stop):
        gx = np.zeros_like(x)
        gx[start:stop] = g
        return (gx,)

    return apply("slice", fwd, vjp, x, start=start, stop=stop)


def take(x, index: int) -> Tensor:
    """Element ``index`` of a vector, or row ``index`` of a matrix."""
    def fwd(x, index=index):
        if not 0 <= index < len(x):
            raise ShapeError(f"take: index {index} out of range for shape {x.shape}")
        return x[index].copy()

    def vjp(g, out, x, index=index):
        gx = np.zeros_like(x)
        gx[index] = g
        return (gx,)

    return apply("take", fwd, vjp, x, index=index)


def stack_rows(rows: Sequence) -> Tensor:
    def fwd(*xs):
        return np.stack(xs)

    return apply("stack_rows", fwd, lambda g, out, *xs: tuple(g), *rows)


# --- gradients ----------------------------------------------------------------

def backward(loss: Tensor, store, tape: Tape | None = None) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every parameter in ``store``.

    Parameters the loss does not depend on get zero arrays.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backward: no tape recorded the loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parts = node.vjp(g, node.out.data, *(t.data for t in node.inputs), **node.kwargs)
        for t, gt in zip(node.inputs, parts):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gt
            else:
                grads[key] = np.array(gt, dtype=np.float64).reshape(t.shape)
    return {name: grads.get(id(p), np.zeros_like(p.data)).copy()
            for name, p in store.items()}


def numeric_gradient(fn: Callable[[], Tensor], store, step: float = 1e-5,
                     extended: bool = False) -> dict[str, np.ndarray]:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for every parameter entry.

    With ``extended`` the perturbed evaluations run in ``np.longdouble``,
    which cuts the rounding noise of the difference quotient by ~2000x on
    x86-64; the step and the formula are unchanged.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    dtype = np.longdouble if extended else np.float64
    saved = {name: p.data for name, p in store.items()}
    out = {}
    try:
        for name, p in store.items():
            p.data = saved[name].astype(dtype)
        h = dtype(step)
        for name, p in store.items():
            flat = p.data.reshape(-1)
            num = np.zeros(flat.size)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = _scalar(fn())
                flat[j] = orig - h
                down = _scalar(fn())
                flat[j] = orig
                num[j] = (up - down) / (2 * h)
            out[name] = num.reshape(p.shape)
    finally:
        for name, p in store.items():
            p.data = saved[name]
    return out


def relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> dict[str, float]:
    """Per-parameter max of |a - n| / max(|a|, |n|, 1e-8)."""
    out = {}
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        out[name] = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return out


def grad_check(fn: Callable[[], Tensor], store, step: float = 1e-5,
               analytic: dict[str, np.ndarray] | None = None, extended: bool = False) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences.

    ``fn`` takes no arguments and reads parameters from ``store``. Pass
    ``analytic`` to check a precomputed gradient instead of taping ``fn``.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    if analytic is None:
        with Tape() as tape:
            loss = fn()
            analytic = backward(loss, store, tape)
    numeric = numeric_gradient(fn, store, step, extended)
    return max(relative_error(analytic, numeric).values(), default=0.0)


def _scalar(t: Tensor):
    v = np.asarray(t.data).reshape(-1)[0]
    if not np.isfinite(v):
        raise FloatingPointError("grad_check: function returned a non-finite value")
    return v
