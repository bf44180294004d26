"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record a node on the active `Tape` only when at least one input
requires a gradient; gradients are allocated only for tensors that require
them.  The finetune instrumentation relies on that: a frozen backbone fed by
data that needs no gradient produces no backbone nodes at all.
"""
import contextvars

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

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

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    __slots__ = ("output", "parents", "backward_fn", "tag", "tape")

    def __init__(self, output, parents, backward_fn, tag, tape):
        self.output = output
        self.parents = parents
        self.backward_fn = backward_fn
        self.tag = tag
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape; operations outside
    any ``with Tape()`` block go to a process-wide default tape.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self.backward_nodes = 0
        self.grad_kernels = 0
        self.backward_flops = 0
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, node):
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def reset(self):
        for node in self.nodes:
            node.output.node = None
        self.nodes = []
        self.consumed = False

    def backward(self, loss):
        if self.consumed:
            raise RuntimeError("backward() called twice without reset()")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ShapeError(f"loss must be a scalar, got shape {list(loss.shape)}")
        if loss.node is None or not loss.requires_grad:
            raise RuntimeError("loss is not on the tape")
        pending = {id(loss): np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            out = node.output
            out.grad = g if out.grad is None else out.grad + g
            self.backward_nodes += 1
            needs = tuple(p.requires_grad for p in node.parents)
            grads = node.backward_fn(g, needs)
            for p, need, pg in zip(node.parents, needs, grads):
                if not need:
                    continue
                self.grad_kernels += 1
                self.backward_flops += _kernel_cost(node, p, pg)
                if p.node is None:
                    # leaf
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    pending[key] = pg if key not in pending else pending[key] + pg
        self.consumed = True


def _kernel_cost(node, parent, grad):
    """Multiply-adds spent producing ``grad``: inner dim x size for matmul."""
    if node.tag == "matmul":
        a, b = node.parents
        return grad.size * (b.shape[1] if parent is a else a.shape[0])
    return max(node.output.data.size, grad.size)


_default_tape = Tape()
_active_tape = contextvars.ContextVar("bnfair_tape", default=None)


def current_tape():
    tape = _active_tape.get()
    return _default_tape if tape is None else tape


def backward(loss):
    """Populate ``.grad`` on every requires_grad ancestor of a scalar loss."""
    if loss.node is None:
        raise RuntimeError("loss is not on the tape")
    loss.node.tape.backward(loss)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, tag):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{tag} produced non-finite values")


def make_result(data, parents, backward_fn, tag):
    """Wrap op output; record a node if any parent needs a gradient."""
    _check_finite(data, tag)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape = current_tape()
        node = Node(out, tuple(parents), backward_fn, tag, tape)
        tape.record(node)
        out.node = node
    return out


def _broadcast_check(a, b, tag):
    sa, sb = a.shape, b.shape
    if sa == sb or a.data.ndim == 0 or b.data.ndim == 0:
        return
    if a.data.ndim == 2 and b.data.ndim == 1 and sa[1] == sb[0]:
        return
    if b.data.ndim == 2 and a.data.ndim == 1 and sb[1] == sa[0]:
        return
    raise ShapeError(f"{tag}: cannot broadcast {list(sa)} with {list(sb)}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                -_unbroadcast(g, b.shape) if needs[1] else None)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {list(a.shape)} @ {list(b.shape)}")

    def bw(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g, needs):
        return (g * mask,)

    return make_result(a.data * mask, (a,), bw, "relu")


def tsum(a):
    a = as_tensor(a)

    def bw(g, needs):
        return (np.full(a.shape, float(g)),)

    return make_result(np.asarray(a.data.sum()), (a,), bw, "sum")


def mean(a):
    a = as_tensor(a)
    n = a.data.size

    def bw(g, needs):
        return (np.full(a.shape, float(g) / n),)

    return make_result(np.asarray(a.data.mean()), (a,), bw, "mean")
