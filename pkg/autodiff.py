#!/usr/bin/env python3
"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Tapes are define-by-run: open one with ``with Tape() as tape:``, run the
forward pass, then ``tape.backward(loss)``. Ops executed outside of an open
tape are plain numpy evaluations and record nothing.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


class AutodiffError(Exception):
    """Base error for the differentiation engine"""


class ShapeError(AutodiffError, ValueError):
    """Operands of an op do not conform"""


class DomainError(AutodiffError, ValueError):
    """Op evaluated outside of its mathematical domain"""


_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape():
    """Innermost open tape on this thread, or None"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array that can take part in a tape"""

    # ndarray <op> Tensor must dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None
        self.tape_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out.data = arr
        out.requires_grad = False
        out.name = None
        out.grad = None
        out.tape_id = None
        out._tape = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._wrap(self.data)

    def assign(self, values):
        """Rebind the parameter value (optimizer updates)"""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"assign: value shape {arr.shape} does not match {self.shape}")
        arr.setflags(write=False)
        self.data = arr

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Node:
    op: str
    output: Tensor
    parents: tuple
    vjp: Callable


class Tape:
    """Ordered record of the ops of one forward pass"""

    def __init__(self):
        self.nodes = []
        self.retained = {}
        self.retained_grads = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, op, output, parents, vjp):
        output.requires_grad = True
        output._tape = self
        output.tape_id = len(self.nodes)
        self.nodes.append(Node(op, output, tuple(parents), vjp))

    def retain(self, name, tensor):
        """Keep the gradient of an intermediate tensor after backward"""
        self.retained[name] = tensor
        return tensor

    def retained_grad(self, name):
        if name not in self.retained_grads:
            raise AutodiffError(f"no gradient retained under {name!r}")
        return self.retained_grads[name]

    def _owns(self, tensor):
        return tensor._tape is self

    def backward(self, root):
        """Propagate d(root) to every requires_grad leaf; returns {leaf: grad}"""
        if root.size != 1:
            raise AutodiffError(f"backward: root must be a scalar, got shape {root.shape}")
        result = {}
        if not self._owns(root):
            if root.requires_grad:
                root.grad = np.ones_like(root.data)
                result[root] = root.grad
            return result

        keep = {id(t): name for name, t in self.retained.items()}
        grads = {id(root): np.ones_like(root.data)}
        leaves = {}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    # scalar operand broadcast against a tensor
                    pg = np.sum(pg).reshape(parent.shape)
                pid = id(parent)
                grads[pid] = grads[pid] + pg if pid in grads else pg
                if not self._owns(parent):
                    leaves[pid] = parent

        for pid, leaf in leaves.items():
            leaf.grad = grads[pid]
            result[leaf] = leaf.grad
        self.retained_grads = {
            name: grads.get(id(t), np.zeros_like(t.data)) for name, t in self.retained.items()
        }
        logger.debug("backward: %d nodes, %d leaves", len(self.nodes), len(result))
        return result


def backward(tape, root):
    return tape.backward(root)


def no_grad_value(x):
    """Raw array of a tensor or array-like"""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.array(x, dtype=np.float64))


def _result(op, data, parents, vjp):
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(op, out, parents, vjp)
    return out


def _operands(op, a, b):
    if a.shape == b.shape:
        return a.data, b.data
    if a.size == 1 and a.ndim <= b.ndim:
        return a.data.reshape(()), b.data
    if b.size == 1 and b.ndim <= a.ndim:
        return a.data, b.data.reshape(())
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# -- elementwise binary -------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = _operands("add", a, b)
    return _result("add", av + bv, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = _operands("sub", a, b)
    return _result("sub", av - bv, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = _operands("mul", a, b)
    return _result("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = _operands("div", a, b)
    if np.any(bv == 0):
        raise DomainError(f"div: zero divisor in operand of shape {b.shape}")
    return _result("div", av / bv, (a, b), lambda g: (g / bv, -g * av / bv**2))


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first operand"""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = _operands("minimum", a, b)
    pick_a = av <= bv
    return _result("minimum", np.where(pick_a, av, bv), (a, b),
                   lambda g: (g * pick_a, g * ~pick_a))


def neg(a):
    a = _as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, factor):
    a = _as_tensor(a)
    factor = float(factor)
    return _result("scale", a.data * factor, (a,), lambda g: (g * factor,))


def clamp(a, lo=None, hi=None):
    """Clip values to [lo, hi]; zero gradient where clipped"""
    a = _as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return _result("clamp", out, (a,), lambda g: (g * inside,))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _result("matmul", av @ bv, (a, b), vjp)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    orig = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


# -- elementwise unary --------------------------------------------------------

def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive value in operand of shape {a.shape}")
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: negative value in operand of shape {a.shape}")
    y = np.sqrt(a.data)
    safe = np.where(y > 0, y, 1.0)
    return _result("sqrt", y, (a,), lambda g: (np.where(y > 0, g / (2.0 * safe), 0.0),))


def square(a):
    a = _as_tensor(a)
    x = a.data
    return _result("square", x * x, (a,), lambda g: (2.0 * g * x,))


def abs_(a):
    a = _as_tensor(a)
    x = a.data
    return _result("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def artanh(a):
    a = _as_tensor(a)
    x = a.data
    if np.any(np.abs(x) >= 1):
        raise DomainError("artanh: argument outside (-1, 1)")
    return _result("artanh", np.arctanh(x), (a,), lambda g: (g / (1.0 - x * x),))


def asinh(a):
    a = _as_tensor(a)
    x = a.data
    return _result("asinh", np.arcsinh(x), (a,), lambda g: (g / np.sqrt(1.0 + x * x),))


def acosh(a):
    a = _as_tensor(a)
    x = a.data
    if np.any(x < 1):
        raise DomainError("acosh: argument below 1")
    # derivative is unbounded at 1; callers reach 1 only where the inner map is stationary
    gap = np.sqrt(np.maximum(x * x - 1.0, 0.0))
    safe = np.where(gap > 0, gap, 1.0)
    return _result("acosh", np.arccosh(x), (a,), lambda g: (np.where(gap > 0, g / safe, 0.0),))


# -- reductions and reshaping along the last axis -----------------------------

def sum_(a):
    a = _as_tensor(a)
    shape = a.shape
    return _result("sum", np.sum(a.data), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    a = _as_tensor(a)
    shape, n = a.shape, max(a.size, 1)
    return _result("mean", np.mean(a.data), (a,), lambda g: (np.full(shape, float(g) / n),))


def sum_last(a):
    a = _as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("sum_last: scalar operand has no last axis")
    n = a.shape[-1]
    return _result("sum_last", np.sum(a.data, axis=-1), (a,),
                   lambda g: (np.repeat(g[..., None], n, axis=-1),))


def expand_last(a, n):
    """Repeat values along a new trailing axis of length n"""
    a = _as_tensor(a)
    return _result("expand_last", np.repeat(a.data[..., None], int(n), axis=-1), (a,),
                   lambda g: (np.sum(g, axis=-1),))


def broadcast_rows(a, rows):
    """Stack a vector into a (rows, n) matrix"""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected a vector, got shape {a.shape}")
    out = np.broadcast_to(a.data, (int(rows), a.shape[0])).copy()
    return _result("broadcast_rows", out, (a,), lambda g: (np.sum(g, axis=0),))


def l2_norm(a):
    a = _as_tensor(a)
    x = a.data
    n = float(np.sqrt(np.sum(x * x)))
    return _result("l2_norm", n, (a,), lambda g: (g * x / n if n > 0 else np.zeros_like(x),))


def norm_last(a):
    """Euclidean norm over the last axis; zero gradient at the origin"""
    a = _as_tensor(a)
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=-1))
    safe = np.where(n > 0, n, 1.0)

    def vjp(g):
        return (np.where(n > 0, g / safe, 0.0)[..., None] * x,)

    return _result("norm_last", n, (a,), vjp)


def log_softmax(a):
    """Logits to log-probabilities along the last axis"""
    a = _as_tensor(a)
    x = a.data
    shifted = x - np.max(x, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _result("log_softmax", y, (a,),
                   lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),))


def pick(a, index):
    """Row-wise selection a[i, index[i]]"""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: cannot index shape {a.shape} with {idx.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros(a.shape)
        out[rows, idx] = g
        return (out,)

    return _result("pick", a.data[rows, idx], (a,), vjp)


def gather_rows(a, index):
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: cannot gather {idx.shape} from {a.shape}")

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result("gather_rows", a.data[idx], (a,), vjp)


def stack_last(tensors):
    """Stack equally-shaped tensors along a new trailing axis"""
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack_last: shapes {sorted(shapes)} differ")
    out = np.stack([t.data for t in tensors], axis=-1)
    return _result("stack_last", out, tuple(tensors),
                   lambda g: tuple(g[..., i] for i in range(len(tensors))))


# -- gradient checking --------------------------------------------------------

def grad_check(f, x, step=1e-6):
    """Max relative error between tape gradients and central differences"""
    if step <= 0:
        raise AutodiffError(f"grad_check: step must be positive, got {step}")
    x0 = np.array(no_grad_value(x), dtype=np.float64)
    point = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(point)
    if not np.all(np.isfinite(y.data)):
        raise AutodiffError("grad_check: function returned a non-finite value")
    analytic = tape.backward(y).get(point, np.zeros_like(x0)).ravel()

    flat = x0.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = f(Tensor(plus.reshape(x0.shape))).item()
        fm = f(Tensor(minus.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise AutodiffError(f"grad_check: non-finite value at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * step)
    if flat.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(np.max(err))


def parameters_grads(params, grads):
    """Align a gradient map with a parameter list (zeros where unreached)"""
    return [grads.get(p, np.zeros_like(p.data)) for p in params]


def maybe_retain(name, tensor):
    tape = current_tape()
    if tape is not None:
        tape.retain(name, tensor)
    return tensor
