"""A small tape-based reverse-mode autodiff engine on top of numpy.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = model.loss(batch)
    tape.backward(loss)

Outside a tape the same functions just compute values, which keeps evaluation
and sampling cheap. Every op also accepts plain arrays; if none of its inputs is
a :class:`DiffTensor` it returns a plain ``ndarray``, so numerical kernels can be
written once and used both with and without gradients.

Implicit broadcasting is limited to a leading batch dimension: a differentiable
operand must either have the output shape or match its trailing axes. Anything
else goes through :func:`broadcast_to`. Constant (non-differentiable) operands
broadcast freely.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from . import numerics


class ShapeError(ValueError):
    pass


class DiffTensor:
    """An ndarray value plus an optional gradient and tape node."""

    __array_priority__ = 100.0  # make ndarray <op> DiffTensor defer to us

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def Parameter(value, name: str | None = None) -> DiffTensor:
    return DiffTensor(np.array(value), requires_grad=True, name=name)


@dataclass
class Node:
    index: int
    op: type
    parents: tuple
    attrs: dict
    out: DiffTensor
    tape: "Tape" = field(repr=False)


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the operations executed while it is active.

    A tape belongs to the thread that opened it and is not meant to be shared.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, op, parents, attrs, out: DiffTensor) -> Node:
        node = Node(len(self.nodes), op, parents, attrs, out, self)
        self.nodes.append(node)
        out.node = node
        return node

    def backward(self, loss: DiffTensor):
        backward(loss)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's forward value from the leaves, in tape order."""
        fresh: dict[int, np.ndarray] = {}
        values = []
        for node in self.nodes:
            args = []
            for p in node.parents:
                if isinstance(p, DiffTensor) and p.node is not None and p.node.tape is self:
                    args.append(fresh[p.node.index])
                else:
                    args.append(_value(p))
            out = node.op.forward(*args, **node.attrs)
            fresh[node.index] = out
            values.append(out)
        return values

    def first_nonfinite(self) -> Node | None:
        """First node (in creation order) whose value contains NaN."""
        for node in self.nodes:
            if np.isnan(node.out.value).any():
                return node
        return None


def _value(x):
    return x.value if isinstance(x, DiffTensor) else x


def _needs_grad(x) -> bool:
    return isinstance(x, DiffTensor) and x.requires_grad


def _check_broadcast(operands, out_shape):
    for x in operands:
        if not _needs_grad(x):
            continue
        shape = x.shape
        if shape == out_shape or shape == ():
            continue
        if len(shape) < len(out_shape) and tuple(out_shape[-len(shape):]) == shape:
            continue
        raise ShapeError(
            f"shape {shape} does not match {out_shape}; only a leading batch "
            "dimension broadcasts implicitly (use broadcast_to)"
        )


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def apply(op, *inputs, **attrs):
    """Run ``op.forward`` and, if a tape is active, record the call."""
    if not any(isinstance(x, DiffTensor) for x in inputs):
        return op.forward(*inputs, **attrs)
    out_value = op.forward(*(_value(x) for x in inputs), **attrs)
    if op.elementwise:
        _check_broadcast(inputs, np.shape(out_value))
    tape = _active_tape()
    track = tape is not None and any(_needs_grad(x) for x in inputs)
    out = DiffTensor(out_value, requires_grad=track)
    if track:
        tape.record(op, inputs, attrs, out)
    return out


def backward(loss: DiffTensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not isinstance(loss, DiffTensor):
        raise TypeError("backward() needs a DiffTensor")
    if loss.value.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:  # the loss is itself a leaf
            g = np.ones_like(loss.value)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    tape = loss.node.tape
    grads: dict[int, np.ndarray] = {loss.node.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        parent_values = [_value(p) for p in node.parents]
        pgrads = node.op.backward(g, node.out.value, *parent_values, **node.attrs)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not _needs_grad(p):
                continue
            pg = _unbroadcast(np.asarray(pg), p.shape).astype(p.dtype, copy=False)
            if p.node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            elif p.node.tape is tape:
                i = p.node.index
                grads[i] = pg if i not in grads else grads[i] + pg
    return None


# ---------------------------------------------------------------------------
# Op definitions. ``forward`` works on arrays; ``backward`` returns one
# gradient (or None) per input.


class Op:
    elementwise = False

    @staticmethod
    def forward(*args, **kw):
        raise NotImplementedError

    @staticmethod
    def backward(g, out, *args, **kw):
        raise NotImplementedError


class Add(Op):
    elementwise = True
    forward = staticmethod(lambda a, b: np.add(a, b))

    @staticmethod
    def backward(g, out, a, b):
        return g, g


class Sub(Op):
    elementwise = True
    forward = staticmethod(lambda a, b: np.subtract(a, b))

    @staticmethod
    def backward(g, out, a, b):
        return g, -g


class Mul(Op):
    elementwise = True
    forward = staticmethod(lambda a, b: np.multiply(a, b))

    @staticmethod
    def backward(g, out, a, b):
        return g * b, g * a


class Div(Op):
    elementwise = True
    forward = staticmethod(lambda a, b: np.divide(a, b))

    @staticmethod
    def backward(g, out, a, b):
        return g / b, -g * out / b


class Neg(Op):
    elementwise = True
    forward = staticmethod(lambda a: np.negative(a))

    @staticmethod
    def backward(g, out, a):
        return (-g,)


class Exp(Op):
    elementwise = True
    forward = staticmethod(lambda a: np.exp(a))

    @staticmethod
    def backward(g, out, a):
        return (g * out,)


class Log(Op):
    elementwise = True
    forward = staticmethod(lambda a: np.log(a))

    @staticmethod
    def backward(g, out, a):
        return (g / a,)


class Tanh(Op):
    elementwise = True
    forward = staticmethod(lambda a: np.tanh(a))

    @staticmethod
    def backward(g, out, a):
        return (g * (1.0 - out * out),)


def _sigmoid(a):
    a = np.asarray(a)
    return expit(a).astype(np.result_type(a, np.float32), copy=False)


class Sigmoid(Op):
    elementwise = True
    forward = staticmethod(_sigmoid)

    @staticmethod
    def backward(g, out, a):
        return (g * out * (1.0 - out),)


class Softplus(Op):
    elementwise = True

    @staticmethod
    def forward(a):
        a = np.asarray(a)
        return np.logaddexp(np.zeros((), dtype=np.result_type(a, np.float32)), a)

    @staticmethod
    def backward(g, out, a):
        return (g * _sigmoid(a),)


class LogAddExp(Op):
    elementwise = True

    @staticmethod
    def forward(a, b):
        return numerics.log_add_exp(a, b)

    @staticmethod
    def backward(g, out, a, b):
        return g * np.exp(a - out), g * np.exp(b - out)


class Square(Op):
    elementwise = True
    forward = staticmethod(lambda a: np.square(a))

    @staticmethod
    def backward(g, out, a):
        return (2.0 * g * a,)


class Sum(Op):
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(g, out, a, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, np.shape(a)),)


class Mean(Op):
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.mean(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(g, out, a, axis=None, keepdims=False):
        a = np.asarray(a)
        n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)


class LogSumExp(Op):
    @staticmethod
    def forward(a, axis=-1, keepdims=False):
        return numerics.log_sum_exp(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(g, out, a, axis=-1, keepdims=False):
        if not keepdims:
            g = np.expand_dims(g, axis)
            out = np.expand_dims(out, axis)
        return (g * np.exp(a - out),)


class LogSoftmax(Op):
    @staticmethod
    def forward(a, axis=-1):
        return a - numerics.log_sum_exp(a, axis=axis, keepdims=True)

    @staticmethod
    def backward(g, out, a, axis=-1):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


class MatMul(Op):
    @staticmethod
    def forward(a, b):
        a, b = np.asarray(a), np.asarray(b)
        if a.shape[-1] != b.shape[0] or b.ndim != 2:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return a @ b

    @staticmethod
    def backward(g, out, a, b):
        a2 = np.reshape(a, (-1, a.shape[-1]))
        g2 = np.reshape(g, (-1, g.shape[-1]))
        return g @ b.T, a2.T @ g2


class Affine(Op):
    """``x @ W + b`` in a single node."""

    @staticmethod
    def forward(x, w, b):
        x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
        if x.shape[-1] != w.shape[0] or w.ndim != 2 or b.shape != (w.shape[1],):
            raise ShapeError(f"affine shape mismatch: x{x.shape} W{w.shape} b{b.shape}")
        return x @ w + b

    @staticmethod
    def backward(g, out, x, w, b):
        x2 = np.reshape(x, (-1, x.shape[-1]))
        g2 = np.reshape(g, (-1, g.shape[-1]))
        return g @ w.T, x2.T @ g2, g2.sum(axis=0)


class Reshape(Op):
    @staticmethod
    def forward(a, shape=None):
        return np.reshape(a, shape)

    @staticmethod
    def backward(g, out, a, shape=None):
        return (np.reshape(g, np.shape(a)),)


class Transpose(Op):
    forward = staticmethod(lambda a: np.swapaxes(a, -1, -2))

    @staticmethod
    def backward(g, out, a):
        return (np.swapaxes(g, -1, -2),)


class BroadcastTo(Op):
    @staticmethod
    def forward(a, shape=None):
        return np.broadcast_to(a, shape).copy()

    @staticmethod
    def backward(g, out, a, shape=None):
        a_shape = np.shape(a)
        lead = g.ndim - len(a_shape)
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(a_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)


class Concat(Op):
    @staticmethod
    def forward(*xs, axis=-1):
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(g, out, *xs, axis=-1):
        sizes = [np.shape(x)[axis] for x in xs]
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))


class GetItem(Op):
    """Basic slicing or fancy indexing; gradients scatter-add back."""

    @staticmethod
    def forward(a, key=None):
        return np.asarray(a)[key]

    @staticmethod
    def backward(g, out, a, key=None):
        grad = np.zeros(np.shape(a), dtype=np.result_type(g))
        np.add.at(grad, key, g)
        return (grad,)


class Gather(Op):
    """``take_along_axis``; repeated indices accumulate in the backward pass."""

    @staticmethod
    def forward(a, index=None, axis=-1):
        return np.take_along_axis(np.asarray(a), index, axis=axis)

    @staticmethod
    def backward(g, out, a, index=None, axis=-1):
        a = np.asarray(a)
        grad = np.zeros(a.shape, dtype=np.result_type(g))
        axis = axis % a.ndim
        idx = list(np.ix_(*[np.arange(n) for n in index.shape]))
        idx[axis] = index
        np.add.at(grad, tuple(idx), g)
        return (grad,)


# ---------------------------------------------------------------------------
# Public functional API


def add(a, b):
    return apply(Add, a, b)


def sub(a, b):
    return apply(Sub, a, b)


def mul(a, b):
    return apply(Mul, a, b)


def div(a, b):
    return apply(Div, a, b)


def neg(a):
    return apply(Neg, a)


def exp(a):
    return apply(Exp, a)


def log(a):
    return apply(Log, a)


def tanh(a):
    return apply(Tanh, a)


def sigmoid(a):
    return apply(Sigmoid, a)


def softplus(a):
    return apply(Softplus, a)


def log_sigmoid(a):
    return neg(softplus(neg(a)))


def silu(a):
    return mul(a, sigmoid(a))


def square(a):
    return apply(Square, a)


def log_add_exp(a, b):
    return apply(LogAddExp, a, b)


def sum_(a, axis=None, keepdims=False):
    return apply(Sum, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return apply(Mean, a, axis=axis, keepdims=keepdims)


def log_sum_exp(a, axis=-1, keepdims=False):
    return apply(LogSumExp, a, axis=axis, keepdims=keepdims)


def log_softmax(a, axis=-1):
    return apply(LogSoftmax, a, axis=axis)


def matmul(a, b):
    return apply(MatMul, a, b)


def affine(x, w, b):
    return apply(Affine, x, w, b)


def reshape(a, shape):
    return apply(Reshape, a, shape=tuple(shape))


def transpose(a):
    return apply(Transpose, a)


def broadcast_to(a, shape):
    return apply(BroadcastTo, a, shape=tuple(shape))


def concat(xs: Sequence, axis=-1):
    return apply(Concat, *xs, axis=axis)


def slice_(a, key):
    return apply(GetItem, a, key=key)


def gather(a, index, axis=-1):
    return apply(Gather, a, index=np.asarray(index), axis=axis)


def value(x) -> np.ndarray:
    """The ndarray behind ``x`` (which may already be an ndarray)."""
    return _value(x)


# ---------------------------------------------------------------------------
# Optimiser


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update on plain arrays.

    ``state`` is ``{"step": int, "m": [...], "v": [...]}``; a missing or empty
    state starts from zeros. Returns ``(new_params, new_state)``.
    """
    if not state:
        state = {
            "step": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params],
        }
    step = state["step"] + 1
    new_params, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params.append((p - update).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_params, {"step": step, "m": new_m, "v": new_v}


class Adam:
    """Stateful wrapper around :func:`adam_step` for a list of parameters."""

    def __init__(self, params: list[DiffTensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict[str, Any] = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        new, self.state = adam_step(
            [p.value for p in self.params], grads, self.state, self.lr,
            self.betas[0], self.betas[1], self.eps,
        )
        for p, v in zip(self.params, new):
            p.value = v
