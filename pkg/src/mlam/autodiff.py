"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records operations eagerly (define-by-run). Each node holds its
forward value; :meth:`Tape.backward` walks the tape in reverse and returns a
mapping ``node id -> gradient``.

There is no implicit broadcasting: elementwise ops require identical shapes and
row replication must go through ``broadcast_row``.
"""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tape",
    "Var",
    "ShapeError",
    "DomainError",
    "OP_KINDS",
    "finite_difference_gradient",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.array(x, dtype=np.float64)


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# Forward rules: (input values, payload) -> (output, saved)
# Backward rules: (grad_out, input values, output, payload, saved) -> input grads


def _f_add(xs, payload):
    _same_shape("add", xs[0], xs[1])
    return xs[0] + xs[1], None


def _b_add(g, xs, out, payload, saved):
    return g, g


def _f_sub(xs, payload):
    _same_shape("sub", xs[0], xs[1])
    return xs[0] - xs[1], None


def _b_sub(g, xs, out, payload, saved):
    return g, -g


def _f_mul(xs, payload):
    _same_shape("mul", xs[0], xs[1])
    return xs[0] * xs[1], None


def _b_mul(g, xs, out, payload, saved):
    return g * xs[1], g * xs[0]


def _f_matmul(xs, payload):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b, None


def _b_matmul(g, xs, out, payload, saved):
    a, b = xs
    return g @ b.T, a.T @ g


def _f_transpose(xs, payload):
    if xs[0].ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {xs[0].shape}")
    return xs[0].T.copy(), None


def _b_transpose(g, xs, out, payload, saved):
    return (g.T,)


def _f_sigmoid(xs, payload):
    return expit(xs[0]), None


def _b_sigmoid(g, xs, out, payload, saved):
    return (g * out * (1.0 - out),)


def _f_tanh(xs, payload):
    return np.tanh(xs[0]), None


def _b_tanh(g, xs, out, payload, saved):
    return (g * (1.0 - out * out),)


def _f_exp(xs, payload):
    return np.exp(xs[0]), None


def _b_exp(g, xs, out, payload, saved):
    return (g * out,)


def _f_log(xs, payload):
    x = xs[0]
    if np.any(x <= 0):
        raise DomainError("non-positive log argument")
    return np.log(x), None


def _b_log(g, xs, out, payload, saved):
    return (g / xs[0],)


def _f_square(xs, payload):
    return xs[0] * xs[0], None


def _b_square(g, xs, out, payload, saved):
    return (2.0 * g * xs[0],)


def _f_sum(xs, payload):
    return np.array(xs[0].sum()), None


def _b_sum(g, xs, out, payload, saved):
    return (np.full(xs[0].shape, float(g)),)


def _f_mean(xs, payload):
    if xs[0].size == 0:
        raise ShapeError("mean: empty input")
    return np.array(xs[0].mean()), None


def _b_mean(g, xs, out, payload, saved):
    return (np.full(xs[0].shape, float(g) / xs[0].size),)


def _f_masked_select(xs, payload):
    mask = payload
    if mask.shape != xs[0].shape:
        raise ShapeError(f"masked_select: mask {mask.shape} vs input {xs[0].shape}")
    return xs[0][mask], None


def _b_masked_select(g, xs, out, payload, saved):
    full = np.zeros(xs[0].shape)
    full[payload] = g
    return (full,)


def _f_broadcast_row(xs, payload):
    x = xs[0]
    rows = int(payload)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"broadcast_row: expected a single row, got {xs[0].shape}")
    return np.repeat(x, rows, axis=0), None


def _b_broadcast_row(g, xs, out, payload, saved):
    return (g.sum(axis=0).reshape(xs[0].shape),)


def _f_concat(xs, payload):
    axis = int(payload)
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[y.shape for y in xs]}")
    return np.concatenate(xs, axis=axis), None


def _b_concat(g, xs, out, payload, saved):
    axis = int(payload)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _f_scalar_mul(xs, payload):
    return float(payload) * xs[0], None


def _b_scalar_mul(g, xs, out, payload, saved):
    return (float(payload) * g,)


def _f_slice_cols(xs, payload):
    start, stop = payload
    x = xs[0]
    if x.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: bad range {payload} for shape {x.shape}")
    return x[:, start:stop].copy(), None


def _b_slice_cols(g, xs, out, payload, saved):
    start, stop = payload
    full = np.zeros(xs[0].shape)
    full[:, start:stop] = g
    return (full,)


def _f_reshape(xs, payload):
    shape = tuple(payload)
    if int(np.prod(shape)) != xs[0].size:
        raise ShapeError(f"reshape: cannot reshape {xs[0].shape} to {shape}")
    return xs[0].reshape(shape).copy(), None


def _b_reshape(g, xs, out, payload, saved):
    return (g.reshape(xs[0].shape),)


_RULES: dict[str, tuple[Callable, Callable, int]] = {
    # kind: (forward, backward, arity); arity -1 means variadic
    "add": (_f_add, _b_add, 2),
    "sub": (_f_sub, _b_sub, 2),
    "mul": (_f_mul, _b_mul, 2),
    "matmul": (_f_matmul, _b_matmul, 2),
    "transpose": (_f_transpose, _b_transpose, 1),
    "sigmoid": (_f_sigmoid, _b_sigmoid, 1),
    "tanh": (_f_tanh, _b_tanh, 1),
    "exp": (_f_exp, _b_exp, 1),
    "log": (_f_log, _b_log, 1),
    "square": (_f_square, _b_square, 1),
    "sum": (_f_sum, _b_sum, 1),
    "mean": (_f_mean, _b_mean, 1),
    "masked_select": (_f_masked_select, _b_masked_select, 1),
    "broadcast_row": (_f_broadcast_row, _b_broadcast_row, 1),
    "concat": (_f_concat, _b_concat, -1),
    "scalar_mul": (_f_scalar_mul, _b_scalar_mul, 1),
    "slice_cols": (_f_slice_cols, _b_slice_cols, 1),
    "reshape": (_f_reshape, _b_reshape, 1),
}

OP_KINDS = tuple(_RULES)


class Tape:
    """Append-only computation record.

    With ``grad_enabled=False`` the tape only evaluates values; no parents or
    saved tensors are kept and :meth:`backward` is unavailable.
    """

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.values: list[np.ndarray] = []
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.payloads: list[Any] = []
        self.saved: list[Any] = []
        self.needs_grad: list[bool] = []

    def __len__(self):
        return len(self.values)

    def _append(self, kind, value, parents, payload, saved, needs_grad):
        self.values.append(value)
        self.kinds.append(kind)
        if self.grad_enabled and needs_grad:
            self.parents.append(parents)
            self.payloads.append(payload)
            self.saved.append(saved)
        else:
            self.parents.append(())
            self.payloads.append(None)
            self.saved.append(None)
        self.needs_grad.append(needs_grad and self.grad_enabled)
        return len(self.values) - 1

    def leaf(self, value, requires_grad: bool = True) -> int:
        """Add an input node; ``requires_grad=False`` makes it a constant."""
        value = _as_array(value)
        return self._append("leaf", value, (), None, None, requires_grad)

    def const(self, value) -> int:
        return self.leaf(value, requires_grad=False)

    def record(self, kind: str, inputs: Sequence[int] = (), payload=None) -> int:
        try:
            fwd, _, arity = _RULES[kind]
        except KeyError:
            raise ValueError(f"unknown op kind {kind!r}") from None
        inputs = tuple(int(i) for i in inputs)
        if arity >= 0 and len(inputs) != arity:
            raise ValueError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
        if arity < 0 and not inputs:
            raise ValueError(f"{kind}: needs at least one input")
        n = len(self.values)
        for i in inputs:
            if not 0 <= i < n:
                raise ValueError(f"{kind}: unknown input node {i}")
        out, saved = fwd([self.values[i] for i in inputs], payload)
        needs = any(self.needs_grad[i] for i in inputs)
        return self._append(kind, out, inputs, payload, saved, needs)

    def detach(self, node: int) -> int:
        """New parentless constant with the same value as ``node``."""
        return self._append("leaf", self.values[node].copy(), (), None, None, False)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        if not self.grad_enabled:
            raise RuntimeError("backward on a tape recorded with grad_enabled=False")
        lv = self.values[loss]
        if lv.shape not in ((), (1,)):
            raise ShapeError(f"backward: loss must be scalar, got shape {lv.shape}")
        grads: dict[int, np.ndarray] = {loss: np.ones(lv.shape)}
        for nid in range(loss, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            parents = self.parents[nid]
            if not parents:
                continue
            _, bwd, _ = _RULES[self.kinds[nid]]
            in_vals = [self.values[i] for i in parents]
            pgrads = bwd(g, in_vals, self.values[nid], self.payloads[nid], self.saved[nid])
            for pid, pg in zip(parents, pgrads):
                if not self.needs_grad[pid]:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return grads


class Var:
    """Handle to a tape node with arithmetic operators."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, nid: int):
        self.tape = tape
        self.id = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.value.shape

    def _wrap(self, kind, inputs, payload=None) -> "Var":
        return Var(self.tape, self.tape.record(kind, inputs, payload))

    def _other(self, other) -> int:
        if isinstance(other, Var):
            return other.id
        return self.tape.const(other)

    def __add__(self, other):
        return self._wrap("add", (self.id, self._other(other)))

    def __radd__(self, other):
        return self._wrap("add", (self._other(other), self.id))

    def __sub__(self, other):
        return self._wrap("sub", (self.id, self._other(other)))

    def __rsub__(self, other):
        return self._wrap("sub", (self._other(other), self.id))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self._wrap("scalar_mul", (self.id,), float(other))
        return self._wrap("mul", (self.id, self._other(other)))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self._wrap("scalar_mul", (self.id,), -1.0)

    def __matmul__(self, other):
        return self._wrap("matmul", (self.id, self._other(other)))

    def __rmatmul__(self, other):
        return self._wrap("matmul", (self._other(other), self.id))

    @property
    def T(self):
        return self._wrap("transpose", (self.id,))

    def sigmoid(self):
        return self._wrap("sigmoid", (self.id,))

    def tanh(self):
        return self._wrap("tanh", (self.id,))

    def exp(self):
        return self._wrap("exp", (self.id,))

    def log(self):
        return self._wrap("log", (self.id,))

    def square(self):
        return self._wrap("square", (self.id,))

    def sum(self):
        return self._wrap("sum", (self.id,))

    def mean(self):
        return self._wrap("mean", (self.id,))

    def masked_select(self, mask):
        return self._wrap("masked_select", (self.id,), np.asarray(mask, dtype=bool))

    def broadcast_row(self, rows: int):
        return self._wrap("broadcast_row", (self.id,), int(rows))

    def slice_cols(self, start: int, stop: int):
        return self._wrap("slice_cols", (self.id,), (int(start), int(stop)))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._wrap("reshape", (self.id,), tuple(int(s) for s in shape))

    def detach(self):
        return Var(self.tape, self.tape.detach(self.id))

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


def concat(vars: Sequence[Var], axis: int = 0) -> Var:
    tape = vars[0].tape
    return Var(tape, tape.record("concat", [v.id for v in vars], int(axis)))


def leaf(tape: Tape, value, requires_grad: bool = True) -> Var:
    return Var(tape, tape.leaf(value, requires_grad))


def const(tape: Tape, value) -> Var:
    return Var(tape, tape.const(value))


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = _as_array(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
