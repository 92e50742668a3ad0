"""Dense tensors with tape-free reverse-mode differentiation.

Each op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to one gradient per parent.  ``Tensor.backward``
orders the graph topologically and replays the closures in reverse.

Broadcasting follows numpy's trailing-dimension rule; gradients are summed
back to the operand shape.  Leading batch dimensions are allowed everywhere,
so a whole minibatch (and every target block and caption) goes through one
graph node per op.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG = os.environ.get("TCJEPA_DEBUG", "0") not in ("0", "", "false")

# additive logit used to exclude positions from a softmax; exp underflows to 0
MASK_LOGIT = -1e9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input outside the domain of an op (empty axis, bad token id, ...)."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class FlopCounter:
    """Running total of multiply-add FLOPs (2 per MAC) spent in ``matmul``."""

    def __init__(self):
        self.flops = 0


_FLOP_COUNTER = None


@contextlib.contextmanager
def count_matmul_flops():
    """Count forward matmul FLOPs issued inside the block."""
    global _FLOP_COUNTER
    prev, _FLOP_COUNTER = _FLOP_COUNTER, FlopCounter()
    try:
        yield _FLOP_COUNTER
    finally:
        _FLOP_COUNTER = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype.kind == "f":
            arr = data
        elif isinstance(data, np.floating):
            # 0-d results of numpy arithmetic arrive as scalars; keep their width
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- operators ----------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; use mul")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)

    # -- reverse pass -------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_nodes(root):
    """Topologically ordered op records reachable from ``root``."""
    return [(n.op, [id(p) for p in n._parents], id(n)) for n in _topo_order(root)]


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op):
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if rg:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(x, c):
    c = x.dtype.type(c)

    def bw(g):
        return (g * c,)

    return _make(x.data * c, (x,), bw, "scale")


def relu(x):
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def gelu(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""

    y, tanh_u = K.gelu_fwd(x.data)

    def bw(g):
        return (K.gelu_bwd(x.data, tanh_u, g),)

    return _make(y, (x,), bw, "gelu")


def absolute(x):
    """|x| with subgradient 0 at 0."""
    sgn = np.sign(x.data)

    def bw(g):
        return (g * sgn,)

    return _make(np.abs(x.data), (x,), bw, "abs")


def elementwise(kind, x, y=None, c=None):
    """Dispatch by name: gelu, relu, abs, add, mul, sub, scale."""
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    if kind == "abs":
        return absolute(x)
    if kind == "add":
        return add(x, y)
    if kind == "mul":
        return mul(x, y)
    if kind == "sub":
        return sub(x, y)
    if kind == "scale":
        return scale(x, c)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product over the last two axes.

    d/da = g @ b^T, d/db = a^T @ g, summed over broadcast batch axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_shared(a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER.flops += 2 * out.size * a.shape[-1]

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def _matmul_shared(a, b):
    """(..., n, k) @ (k, m) as one flat GEMM; the weight gradient is a single GEMM too."""
    k, m = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (m,))
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER.flops += 2 * out.size * k

    def bw(g):
        g2 = g.reshape(-1, m)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """x @ w^T + b with ``w`` stored (out, in) like the math W·x."""
    y = matmul(x, swapaxes(w, -1, -2))
    return y if b is None else add(y, b)


def reshape(x, shape):
    shape = tuple(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes):
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def swapaxes(x, a1, a2):
    axes = list(range(x.ndim))
    a1, a2 = a1 % x.ndim, a2 % x.ndim
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def broadcast_to(x, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: {x.shape} -> {shape}") from None

    def bw(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), bw, "broadcast")


def concat(xs, axis=0):
    xs = list(xs)
    if not xs:
        raise DomainError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in xs]} along {axis}: {e}") from None
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, xs, bw, "concat")


def stack(xs, axis=0):
    xs = list(xs)
    if not xs:
        raise DomainError("stack of an empty list")
    try:
        out = np.stack([t.data for t in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(f"stack: {[t.shape for t in xs]}: {e}") from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(out, xs, bw, "stack")


def index(x, key):
    """Basic or advanced indexing; backward scatters with accumulation."""
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)

    basic = not any(isinstance(k, (np.ndarray, list)) for k in (key if isinstance(key, tuple) else (key,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(out.copy(), (x,), bw, "index")


def gather_rows(x, idx):
    """Select rows along axis -2 with a per-batch index matrix.

    ``x`` is (..., T, d) and ``idx`` is (..., K) of ints broadcastable to the
    batch dims of ``x``; the result is (..., K, d).  Repeated indices are
    allowed and their gradients accumulate.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim == 1:
        out = x.data[..., idx, :]

        def bw(g):
            full = np.zeros_like(x.data)
            np.add.at(full, (Ellipsis, idx, slice(None)), g)
            return (full,)

        return _make(out, (x,), bw, "gather")
    if idx.shape[:-1] != x.shape[:-2]:
        raise DimensionError(f"gather_rows: index batch {idx.shape[:-1]} vs tensor batch {x.shape[:-2]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise DomainError("gather_rows: index out of range")
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def bw(g):
        full = np.zeros_like(x.data)
        flat_full = full.reshape(-1, x.shape[-2], x.shape[-1])
        flat_idx = idx.reshape(-1, idx.shape[-1])
        flat_g = g.reshape(-1, idx.shape[-1], x.shape[-1])
        b = np.repeat(np.arange(flat_idx.shape[0]), flat_idx.shape[1])
        np.add.at(flat_full, (b, flat_idx.ravel()), flat_g.reshape(-1, x.shape[-1]))
        return (full,)

    return _make(out, (x,), bw, "gather")


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DomainError(f"axis {a} out of range for ndim {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def reduce(x, kind, axis=None, keepdims=False):
    """sum / mean / max over ``axis``.

    The max gradient goes entirely to the first (lowest-index) maximiser
    along the reduced axis, so ties are deterministic.
    """
    axes = _norm_axis(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise DomainError(f"reduce {kind} over an empty axis of shape {x.shape}")
    kshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kshape), x.shape).copy(),)

    elif kind == "mean":
        n = int(np.prod([x.shape[a] for a in axes]))
        out = x.data.mean(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kshape) / x.dtype.type(n), x.shape).copy(),)

    elif kind == "max":
        if len(axes) != 1:
            moved = np.moveaxis(x.data, axes, range(-len(axes), 0))
            flat = moved.reshape(moved.shape[: x.ndim - len(axes)] + (-1,))
            tmp = reduce(Tensor(flat), "max", -1, keepdims=False)
            out = tmp.data.reshape(kshape) if keepdims else tmp.data
            arg = np.argmax(flat, axis=-1)

            def bw(g):
                gf = np.zeros_like(flat)
                np.put_along_axis(gf, arg[..., None], g.reshape(arg.shape + (1,)), axis=-1)
                gm = gf.reshape(moved.shape)
                return (np.moveaxis(gm, range(-len(axes), 0), axes),)
        else:
            a = axes[0]
            arg = np.argmax(x.data, axis=a)
            out = np.take_along_axis(x.data, np.expand_dims(arg, a), axis=a)
            if not keepdims:
                out = np.squeeze(out, axis=a)

            def bw(g):
                full = np.zeros_like(x.data)
                np.put_along_axis(full, np.expand_dims(arg, a), g.reshape(kshape), axis=a)
                return (full,)
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, f"reduce_{kind}")


def softmax(x, axis=-1):
    """Max-subtracted softmax.  NaN input raises FloatingPointError."""
    if np.isnan(x.data).any():
        raise FloatingPointError("softmax: NaN in input")
    moved = axis not in (-1, x.ndim - 1)
    xd = np.moveaxis(x.data, axis, -1) if moved else x.data
    y = K.softmax_fwd(xd)

    def bw(g):
        gd = np.moveaxis(g, axis, -1) if moved else g
        dx = K.softmax_bwd(y, np.ascontiguousarray(gd))
        return (np.moveaxis(dx, -1, axis) if moved else dx,)

    out = np.moveaxis(y, -1, axis) if moved else y
    return _make(np.ascontiguousarray(out), (x,), bw, "softmax")


def layernorm(x, gamma, beta, eps=1e-6):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: feature dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise DomainError("layernorm: eps must be positive")
    out, xhat, rstd = K.layernorm_fwd(x.data, gamma.data, beta.data, eps)

    def bw(g):
        dx, dgamma, dbeta = K.layernorm_bwd(g, xhat, rstd, gamma.data)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "layernorm")


def l2_norm(x, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; the subgradient at 0 is 0."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, x.data / safe, 0) * gk,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (x,), bw, "l2_norm")


def l2_distance(a, b):
    """||a - b||_2 over the last axis (one value per leading index)."""
    if a.shape != b.shape:
        raise DimensionError(f"l2_distance: {a.shape} vs {b.shape}")
    return l2_norm(sub(a, b), axis=-1)


def normalize(x, axis=-1, eps=1e-12):
    """x / max(||x||, eps) along ``axis``."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    nc = np.maximum(n, eps)
    y = x.data / nc
    clipped = n < eps

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        dx = np.where(clipped, g / nc, (g - y * dot) / nc)
        return (dx,)

    return _make(y, (x,), bw, "normalize")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    ok: bool
    max_rel_err: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    per_input: list = field(default_factory=list)

    def __str__(self):
        status = "ok" if self.ok else "FAIL"
        return (f"{status}: max rel err {self.max_rel_err:.3e} at input {self.worst_input} "
                f"index {self.worst_index} (analytic {self.analytic:.6e}, numeric {self.numeric:.6e})")


def grad_check(f, inputs, h=1e-5, tol=1e-4, atol=1e-7, max_coords=None, rng=None):
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, atol); the report
    carries the worst coordinate.  ``max_coords`` subsamples coordinates of
    large inputs (chosen by ``rng``), which keeps full-model checks cheap.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    if out.data.size != 1:
        raise DimensionError(f"grad_check: f must return a scalar, got {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)

    worst = (0.0, 0, (), 0.0, 0.0)
    per_input = []
    with no_grad():
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            local = 0.0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = float(f(*inputs).data)
                flat[c] = orig - h
                fm = float(f(*inputs).data)
                flat[c] = orig
                num = (fp - fm) / (2 * h)
                ana = float(analytic[k].reshape(-1)[c])
                err = abs(ana - num) / max(abs(ana), abs(num), atol)
                local = max(local, err)
                if err > worst[0]:
                    worst = (err, k, np.unravel_index(c, t.shape), ana, num)
            per_input.append(local)
    for t in inputs:
        t.grad = None
    return GradCheckReport(ok=worst[0] < tol, max_rel_err=worst[0], worst_input=worst[1],
                           worst_index=tuple(int(i) for i in worst[2]), analytic=worst[3],
                           numeric=worst[4], per_input=per_input)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (n, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")
