"""Reverse-mode autodiff on numpy arrays.

Small tape engine: every operation that touches a gradient-requiring
tensor links the output back to its inputs together with a closure that
propagates the adjoint. ``backward`` topologically orders the reachable
subgraph into a :class:`Tape` and walks it once in reverse. All values
are float64; the op set is exactly what the mesh surrogate and the
element-residual loss need (dense linear algebra, indexed gather/scatter,
layer norm, 1D convolution and a constant-sparse matmul for graph
aggregation).

Populated ``.grad`` arrays may share storage with each other (the
accumulator adopts single-contribution adjoints without copying), so
treat them as read-only: rebind ``p.grad`` or copy, never mutate in
place.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse as _sparse


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording entirely.

    Forward values are bit-identical to grad mode: the same numpy code
    runs either way, recording is the only difference.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected a raw array, got a Tensor")
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array with an optional gradient slot.

    ``grad`` is populated by :func:`backward` and has the same shape as
    ``data``. Tensors are immutable once created (ops always allocate
    new outputs).
    """

    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_vjp",
                 "_grad_shared")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._inputs: tuple[Tensor, ...] = ()
        self._vjp = None  # closure: adjoint of output -> tuple of input adjoints
        self._grad_shared = False  # .grad may alias another array; copy before +=

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values with no history; gradients stop here."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None
        self._grad_shared = False

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """Learnable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def matmul_const(S, x) -> Tensor:
    """``S @ x`` for a constant (scipy sparse or ndarray) matrix ``S``.

    The fast path for graph gather/aggregate: adjoint is ``S.T @ g``.
    """
    x = _lift(x)
    out = S @ x.data
    if _sparse.issparse(out):  # pragma: no cover - S dense & x 1D edge case
        out = np.asarray(out)
    ST = S.T
    return _make(np.asarray(out), (x,), lambda g: (np.asarray(ST @ g),))


def linear(x, w, b=None) -> Tensor:
    """Fused affine map ``x @ w + b`` (single tape node)."""
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2D operands, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear inner dims differ: {x.data.shape} vs {w.data.shape}")
    out = x.data @ w.data
    if b is None:
        return _make(out, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    b = _lift(b)
    out += b.data
    return _make(out, (x, w, b),
                 lambda g: (g @ w.data.T, x.data.T @ g,
                            _unbroadcast(g, b.data.shape)))


def add_n(*terms) -> Tensor:
    """Sum of equally shaped tensors as one tape node."""
    ts = [_lift(t) for t in terms]
    shape = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"add_n shapes differ: {shape} vs {t.data.shape}")
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data
    return _make(out, tuple(ts), lambda g: (g,) * len(ts))


# ---------------------------------------------------------------------------
# reductions and shape plumbing

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a) -> Tensor:
    """Swap the two axes of a matrix."""
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2D tensor, got shape {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def concatenate(parts, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# indexed access

def gather(a, idx, axis: int = 0) -> Tensor:
    """Select rows/slices ``a[idx]`` along ``axis`` (idx is a 1D int array)."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        acc = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(acc, idx, g)
        else:
            accm = np.moveaxis(acc, axis, 0)
            np.add.at(accm, idx, np.moveaxis(g, axis, 0))
        return (acc,)

    return _make(out, (a,), vjp)


def scatter_add(a, idx, size: int, axis: int = 0) -> Tensor:
    """Add slices of ``a`` into a zero tensor of length ``size`` along ``axis``.

    ``out[j] = sum over i with idx[i] == j of a[i]``; the adjoint is a gather.
    """
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = list(a.data.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=np.float64)
    if axis == 0:
        np.add.at(out, idx, a.data)
    else:
        outm = np.moveaxis(out, axis, 0)
        np.add.at(outm, idx, np.moveaxis(a.data, axis, 0))
    return _make(out, (a,), lambda g: (np.take(g, idx, axis=axis),))


# ---------------------------------------------------------------------------
# neural-net layers

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (feature) axis, then scale and shift."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        dbeta = _unbroadcast(g, beta.data.shape)
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), vjp)


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """1D convolution, no padding.

    ``x``: (batch, in_channels, length); ``w``: (out_channels, in_channels,
    kernel); output length is ``(length - kernel) // stride + 1``.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects 3D input/weight, got {x.data.shape} and {w.data.shape}")
    B, Cin, L = x.data.shape
    Cout, Cin_w, K = w.data.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv1d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    if K > L:
        raise ShapeError(f"conv1d kernel {K} longer than input length {L}")
    Lout = (L - K) // stride + 1
    s0, s1, s2 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, shape=(B, Cin, Lout, K), strides=(s0, s1, s2 * stride, s2))
    out = np.einsum("bclk,ock->bol", windows, w.data, optimize=True)
    inputs = (x, w)
    if b is not None:
        b = _lift(b)
        out = out + b.data[None, :, None]
        inputs = (x, w, b)

    def vjp(g):
        dw = np.einsum("bol,bclk->ock", g, windows, optimize=True)
        dxw = np.einsum("bol,ock->bclk", g, w.data, optimize=True)
        dx = np.zeros_like(x.data)
        pos = stride * np.arange(Lout)
        for k in range(K):
            dx[:, :, pos + k] += dxw[:, :, :, k]
        if b is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2)))

    return _make(out, inputs, vjp)


# ---------------------------------------------------------------------------
# backward pass

class Tape:
    """Topologically ordered record of the ops reaching one output tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def trace(out: Tensor) -> Tape:
    """Collect the gradient-requiring subgraph below ``out`` in topo order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            stack.append((inp, False))
    return Tape(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every reachable gradient-requiring tensor.

    ``loss`` must be scalar. Returns the tape that was walked.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from all parameters; nothing to differentiate")
    tape = trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for inp, g in zip(node._inputs, grads):
            if not inp.requires_grad:
                continue
            if inp.grad is None:
                # adopt the adjoint without copying; it may alias an upstream
                # gradient, so it is never mutated in place (see module note)
                inp.grad = g
                inp._grad_shared = True
            elif inp._grad_shared:
                inp.grad = inp.grad + g
                inp._grad_shared = False
            else:
                inp.grad += g
    return tape
