"""Dense tensors with reverse-mode automatic differentiation on a replay tape.

Operations execute eagerly on numpy arrays. While a :func:`tape` context is
active, every differentiable op appends a node (inputs, output, backward rule)
in execution order, which is by construction a topological order of the
computation graph. ``Tape.backward`` replays the nodes in reverse exactly once
each, accumulating gradients out of place in that fixed order, so repeated
runs are bit-identical. Reductions delegate to numpy's deterministic pairwise
summation; nothing accumulates through atomics or unordered iteration.

Every op checks its output for NaN/Inf and raises :class:`NonFiniteError`
instead of propagating, which pins divergence to the op that produced it.
"""

import contextlib
import math

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf values."""


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op!r} produced non-finite values")


class Tensor:
    """A row-major contiguous n-d array, optionally participating in a tape.

    ``data`` is float32 or float64. ``grad``, once populated by a backward
    pass, has the same shape and dtype as ``data``. Tensors are treated as
    immutable after creation; only optimizer steps rebind ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None, check=True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if check:
            _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        """The underlying array. Treat as read-only."""
        return self.data

    def detach(self):
        """Same data, severed from gradient tracking."""
        return Tensor(self.data, requires_grad=False, check=False)

    def sum(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=True)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def __getitem__(self, key):
        return _getitem(self, key)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{grad})"


class TapeNode:
    """One recorded op: its inputs, its output, and the backward rule."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Execution-ordered record of differentiable ops.

    Nodes appear in the order their forward ran, so every node's inputs
    precede it. ``backward`` visits each node exactly once, in reverse.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def backward(self, root, grad=None):
        """Accumulate d(root)/d(leaf) into ``grad`` of every reachable tensor.

        ``grad`` seeds the root cotangent and defaults to ones (suitable for
        scalar losses).
        """
        if grad is None:
            grad = np.ones_like(root.data)
        else:
            grad = np.asarray(grad, dtype=root.data.dtype)
            if grad.shape != root.data.shape:
                raise ShapeError(
                    f"seed gradient shape {grad.shape} != root shape {root.data.shape}"
                )
        root.grad = grad if root.grad is None else root.grad + grad
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            for x, gx in zip(node.inputs, node.backward(g)):
                if gx is None:
                    continue
                x.grad = gx if x.grad is None else x.grad + gx


_TAPE_STACK = []


def _current_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def tape():
    """Record ops onto a fresh tape for the duration of the context."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


@contextlib.contextmanager
def no_grad():
    """Suspend recording; ops inside produce constants."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def zero_grads(params):
    """Drop accumulated gradients on a dict or iterable of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def _emit(op, inputs, data, backward):
    _check_finite(data, op)
    tp = _current_tape()
    rec = tp is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rec, check=False)
    if rec:
        tp.nodes.append(TapeNode(op, tuple(inputs), out, backward))
    return out


def _pair(a, b, op):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if ta and tb:
        if a.data.dtype != b.data.dtype:
            raise TypeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")
        return a, b
    if ta:
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if tb:
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    raise TypeError(f"{op}: expected at least one Tensor operand")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _pair(a, b, "add")

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", (a, b), a.data + b.data, bwd)


def sub(a, b):
    a, b = _pair(a, b, "sub")

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit("sub", (a, b), a.data - b.data, bwd)


def mul(a, b):
    a, b = _pair(a, b, "mul")

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", (a, b), a.data * b.data, bwd)


def div(a, b):
    a, b = _pair(a, b, "div")

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None,
        )

    return _emit("div", (a, b), a.data / b.data, bwd)


def neg(a):
    def bwd(g):
        return ((-g) if a.requires_grad else None,)

    return _emit("neg", (a,), -a.data, bwd)


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast.

    Gradients follow dL/da = g @ bᵀ and dL/db = aᵀ @ g, summed over
    broadcast batch axes.
    """
    a, b = _pair(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(
            f"matmul batch dimensions not broadcastable: {a.shape} and {b.shape}"
        ) from exc

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), data, bwd)


def linear(x, w, b=None):
    """x @ w (+ b). ``x`` may carry any number of leading axes.

    Leading axes are flattened so the product runs as a single GEMM rather
    than a batch of small ones.
    """
    if x.ndim == 2:
        out = matmul(x, w)
    else:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, x.shape[-1]))
        out = reshape(matmul(flat, w), (*lead, w.shape[-1]))
    return out if b is None else add(out, b)


def reshape(a, shape):
    def bwd(g):
        return (g.reshape(a.shape) if a.requires_grad else None,)

    return _emit("reshape", (a,), a.data.reshape(shape), bwd)


def transpose(a, axes=None):
    """Permute axes; ``axes=None`` swaps the last two."""
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv) if a.requires_grad else None,)

    return _emit("transpose", (a,), a.data.transpose(axes), bwd)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    dtype = tensors[0].data.dtype
    if any(t.data.dtype != dtype for t in tensors):
        raise TypeError("concat: mixed dtypes")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for t, p in zip(tensors, pieces))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), bwd)


def _getitem(a, key):
    """Basic (int/slice/ellipsis) indexing only; advanced indexing is rejected."""
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice)) and p is not Ellipsis:
            raise TypeError(f"unsupported index component {p!r}; use gather_rows")

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _emit("getitem", (a,), a.data[key].copy(), bwd)


def gather_rows(x, index):
    """Select ``out[s, j] = x[s, index[s, j]]`` along axis 1 of a (b, n, d) tensor."""
    index = np.asarray(index)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: got x {x.shape}, index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError(f"gather_rows: index out of range [0, {x.shape[1]})")
    data = np.take_along_axis(x.data, index[:, :, None], axis=1)
    rows = np.arange(x.shape[0])[:, None]

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        z = np.zeros_like(x.data)
        np.add.at(z, (rows, index), g)
        return (z,)

    return _emit("gather_rows", (x,), data, bwd)


def scatter_rows(values, index, n_rows):
    """Place ``values[s, j]`` at row ``index[s, j]`` of a zero (b, n_rows, d) tensor.

    Indices must be unique per sample; duplicate targets overwrite.
    """
    index = np.asarray(index)
    if values.ndim != 3 or index.shape != values.shape[:2]:
        raise ShapeError(f"scatter_rows: got values {values.shape}, index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise IndexError(f"scatter_rows: index out of range [0, {n_rows})")
    b, _, d = values.shape
    data = np.zeros((b, n_rows, d), dtype=values.data.dtype)
    rows = np.arange(b)[:, None]
    data[rows, index] = values.data

    def bwd(g):
        if not values.requires_grad:
            return (None,)
        return (np.take_along_axis(g, index[:, :, None], axis=1),)

    return _emit("scatter_rows", (values,), data, bwd)


def _norm_axes(axis, ndim):
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(ax % ndim for ax in axes)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, _norm_axes(axis, len(shape)))
    return np.broadcast_to(g, shape)


def _reduce(a, axis, keepdims, mean):
    if mean:
        count = a.size if axis is None else int(
            np.prod([a.shape[ax] for ax in _norm_axes(axis, a.ndim)])
        )
        data = a.data.mean(axis=axis, keepdims=keepdims)
    else:
        count = 1
        data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        return (_expand_reduced(g, a.shape, axis, keepdims) / count if mean
                else _expand_reduced(g, a.shape, axis, keepdims),)

    return _emit("mean" if mean else "sum", (a,), data, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Gaussian error linear unit, tanh form (self-consistent derivative)."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(u)
    data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        du = _GELU_C * (1.0 + 0.134145 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _emit("gelu", (x,), data, bwd)


def softmax(x):
    """Softmax over the last axis, computed with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, bwd)


def log_softmax(x):
    """Log-softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), ls, bwd)


def layer_norm(x, gamma=None, beta=None, eps=1e-6):
    """Standardize over the last axis; affine applied only when given.

    With no affine this is the shared LN(.) used both for reconstruction
    targets and for normalizing alignment targets.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    r = np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    y = xc / r
    inputs = [x]
    data = y
    if gamma is not None:
        inputs.append(gamma)
        data = data * gamma.data
    if beta is not None:
        inputs.append(beta)
        data = data + beta.data

    def bwd(g):
        grads = []
        gy = g * gamma.data if gamma is not None else g
        if x.requires_grad:
            gx = (
                gy
                - gy.mean(axis=-1, keepdims=True)
                - y * (gy * y).mean(axis=-1, keepdims=True)
            ) / r
            grads.append(gx)
        else:
            grads.append(None)
        d = x.shape[-1]
        if gamma is not None:
            grads.append(
                (g * y).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
            )
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None)
        return tuple(grads)

    return _emit("layer_norm", tuple(inputs), data, bwd)


def smooth_l1(x, delta=1.0):
    """Elementwise quadratic-below-delta, linear-above-delta penalty.

    0.5*x^2/delta for |x| < delta, else |x| - 0.5*delta. Continuous with
    continuous first derivative at +-delta.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    xd = x.data
    ax = np.abs(xd)
    small = ax < delta
    data = np.where(small, 0.5 * xd * xd / delta, ax - 0.5 * delta)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (g * np.where(small, xd / delta, np.sign(xd)),)

    return _emit("smooth_l1", (x,), data.astype(xd.dtype, copy=False), bwd)


def softmax_cross_entropy(logits, labels, smoothing=0.0):
    """Mean smoothed cross-entropy between rows of logits and integer labels.

    The smoothed target is (1-smoothing)*onehot + smoothing/n_classes.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    if logits.ndim != 2:
        raise ShapeError(f"expected (batch, classes) logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    target = np.full((b, c), smoothing / c, dtype=logits.data.dtype)
    target[np.arange(b), labels] += 1.0 - smoothing
    lp = log_softmax(logits)
    return neg(mul(lp, Tensor(target, check=False)).sum(axis=-1).mean())


def scaled_dot_product_attention(q, k, v):
    """softmax(q @ k^T / sqrt(d)) @ v over the trailing (tokens, d) axes."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return matmul(softmax(mul(matmul(q, transpose(k)), scale)), v)
