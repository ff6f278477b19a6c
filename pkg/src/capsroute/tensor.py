"""Dense n-d arrays with tape-based reverse-mode differentiation.

Every differentiable primitive records one node on the active :class:`Tape`
when at least one input requires a gradient. Nodes are appended in execution
order, so the tape is already topologically sorted and :func:`backward` is a
single reverse sweep.

Binary elementwise primitives accept operands of equal rank whose extents
match or are 1 (keepdims-style broadcasting), plus plain scalars. Operands of
different rank are rejected so that a misplaced axis fails loudly.
"""

import itertools
import threading
import weakref
from contextlib import contextmanager

import numpy as np

from . import accel

__all__ = [
    "Tensor", "Tape", "ShapeError", "DomainError", "backward", "no_grad",
    "precision", "get_default_dtype", "set_default_dtype", "tensor", "parameter",
    "constant", "current_tape",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_ids = itertools.count(1)
_local = threading.local()


def _ctx():
    if not hasattr(_local, "tapes"):
        _local.tapes = [Tape()]
        _local.grad_enabled = True
        _local.dtype = np.dtype(np.float32)
    return _local


def get_default_dtype():
    return _ctx().dtype


def set_default_dtype(bits):
    """Set the precision for new tensors: 32 or 64 (or a numpy float dtype)."""
    ctx = _ctx()
    prev = ctx.dtype
    if bits in (32, "32"):
        ctx.dtype = np.dtype(np.float32)
    elif bits in (64, "64"):
        ctx.dtype = np.dtype(np.float64)
    else:
        ctx.dtype = np.dtype(bits)
    return prev


@contextmanager
def precision(bits):
    prev = set_default_dtype(bits)
    try:
        yield
    finally:
        _ctx().dtype = prev


@contextmanager
def no_grad():
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


def current_tape():
    return _ctx().tapes[-1]


class _Node:
    __slots__ = ("op", "in_ids", "in_req", "leaves", "out_ids", "out_refs", "out_meta", "vjp")


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager to scope a forward/backward pass; otherwise a
    per-thread default tape is used.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ctx().tapes.append(self)
        return self

    def __exit__(self, *exc):
        tapes = _ctx().tapes
        if tapes[-1] is self:
            tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes = []

    def ops(self):
        return [n.op for n in self.nodes]

    def count(self, op):
        return sum(1 for n in self.nodes if n.op == op)

    def record(self, op, inputs, outputs, vjp):
        node = _Node()
        node.op = op
        node.in_ids = tuple(t.node_id for t in inputs)
        node.in_req = tuple(t.requires_grad for t in inputs)
        # only leaves are held strongly; intermediates may be freed
        node.leaves = {t.node_id: t for t in inputs if t.requires_grad and t._leaf}
        node.out_ids = tuple(t.node_id for t in outputs)
        node.out_refs = tuple(weakref.ref(t) for t in outputs)
        node.out_meta = tuple((t.data.shape, t.data.dtype) for t in outputs)
        node.vjp = vjp
        self.nodes.append(node)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_leaf", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_ids)
        self._leaf = True

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}{rg})"

    # -- operators ----------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad=False, name=None, dtype=None):
    if dtype is None:
        dtype = get_default_dtype()
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def parameter(data, name=None, dtype=None):
    return tensor(data, requires_grad=True, name=name, dtype=dtype)


def constant(data, like=None):
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(data, dtype=dtype)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else get_default_dtype()),
                  dtype=like.dtype if like is not None else get_default_dtype())


def _emit(op, inputs, outs, vjp):
    """Wrap raw output arrays as tensors and record the op when needed."""
    single = not isinstance(outs, tuple)
    arrays = (outs,) if single else outs
    tensors = tuple(Tensor(a, dtype=a.dtype) for a in arrays)
    ctx = _ctx()
    if ctx.grad_enabled and any(t.requires_grad for t in inputs):
        for t in tensors:
            t.requires_grad = True
            t._leaf = False
        ctx.tapes[-1].record(op, inputs, tensors, vjp)
    return tensors[0] if single else tensors


def backward(loss, tape=None):
    """Populate ``.grad`` on every live tensor the loss depends on.

    The tape is consumed: nodes are released as they are processed so saved
    activations can be freed during the sweep.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.shape}")
    tape = tape or current_tape()
    grads = {loss.node_id: np.ones_like(loss.data)}
    leaves = {loss.node_id: loss} if loss._leaf else {}
    nodes = tape.nodes
    tape.nodes = []
    while nodes:
        node = nodes.pop()
        outs = [grads.pop(i, None) for i in node.out_ids]
        if all(g is None for g in outs):
            continue
        for ref, g in zip(node.out_refs, outs):
            t = ref()
            if t is not None and g is not None:
                t.grad = g
        if len(outs) == 1:
            in_grads = node.vjp(outs[0])
        else:
            outs = [g if g is not None else np.zeros(shape, dtype)
                    for g, (shape, dtype) in zip(outs, node.out_meta)]
            in_grads = node.vjp(outs)
        for tid, req, g in zip(node.in_ids, node.in_req, in_grads):
            if not req or g is None:
                continue
            prev = grads.get(tid)
            grads[tid] = g if prev is None else prev + g
        leaves.update(node.leaves)
    for tid, g in grads.items():
        t = leaves.get(tid)
        if t is not None:
            t.grad = g


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_pair(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.ndim == 0 or b.data.ndim == 0:
        return
    if len(sa) != len(sb) or any(x != y and x != 1 and y != 1 for x, y in zip(sa, sb)):
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (s, gs) in enumerate(zip(shape, g.shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary(op, a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    _check_pair(op, a, b)
    return a, b


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _binary("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _binary("mul", a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if ra else None,
                _unbroadcast(g * ad, bd.shape) if rb else None)
    return _emit("mul", (a, b), ad * bd, vjp)


def div(a, b):
    a, b = _binary("div", a, b)
    if np.any(b.data == 0):
        raise DomainError(f"div: zero divisor in operand of shape {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd
    rb = b.requires_grad

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * out / bd, bd.shape) if rb else None
        return ga, gb
    return _emit("div", (a, b), out, vjp)


def neg(a):
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def power(a, p):
    p = float(p)
    x = a.data
    if p != int(p) and np.any(x < 0):
        raise DomainError("power: negative base with non-integer exponent")
    return _emit("power", (a,), x ** p, lambda g: (g * p * x ** (p - 1),))


def square(a):
    x = a.data
    return _emit("square", (a,), x * x, lambda g: (2.0 * g * x,))


def exp(a):
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"log: nonpositive input (min {x.min()!r})")
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def sqrt(a):
    x = a.data
    if np.any(x < 0):
        raise DomainError(f"sqrt: negative input (min {x.min()!r})")
    out = np.sqrt(x)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0).astype(x.dtype),)
    return _emit("sqrt", (a,), out, vjp)


def tanh(a):
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x):
    return accel._sigmoid(x) if x.ndim else np.asarray(accel._sigmoid(x.reshape(1))[0])


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a):
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    return _emit("softplus", (a,), out, lambda g: (g * _sigmoid_np(x),))


def relu(a):
    x = a.data
    mask = x > 0
    return _emit("relu", (a,), np.maximum(x, x.dtype.type(0)), lambda g: (g * mask,))


def maximum(a, value):
    """Elementwise max with a constant. The gradient goes to the tensor where it wins."""
    x = a.data
    keep = x >= value
    return _emit("maximum", (a,), np.where(keep, x, x.dtype.type(value)), lambda g: (g * keep,))


def minimum(a, value):
    x = a.data
    keep = x <= value
    return _emit("minimum", (a,), np.where(keep, x, x.dtype.type(value)), lambda g: (g * keep,))


def clip(a, lo, hi):
    x = a.data
    keep = (x >= lo) & (x <= hi)
    return _emit("clip", (a,), np.clip(x, lo, hi).astype(x.dtype), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)
    return _emit("sum", (a,), np.asarray(out, dtype=a.dtype), vjp)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def sq_norm(a, axis=-1, keepdims=False):
    """Squared L2 norm along ``axis``."""
    x = a.data
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray((x * x).sum(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (2.0 * g * x,)
    return _emit("sq_norm", (a,), out, vjp)


def frobenius_norm(a, keepdims=False):
    """Frobenius norm over the two trailing axes."""
    return sqrt(sq_norm(a, (-2, -1), keepdims))


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def expand_dims(a, axis):
    return reshape(a, np.expand_dims(a.data, axis).shape)


def squeeze(a, axis):
    return reshape(a, np.squeeze(a.data, axis).shape)


def broadcast_to(a, shape):
    old = a.shape
    if len(old) != len(shape):
        raise ShapeError(f"broadcast_to: rank mismatch {old} -> {tuple(shape)}")
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _emit("broadcast_to", (a,), out, lambda g: (_unbroadcast(g, old),))


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]
    advanced = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx))

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)
    return _emit("getitem", (a,), np.array(out, dtype=dtype, copy=True) if np.ndim(out) else np.asarray(out, dtype=dtype), vjp)


def concat(tensors, axis=-1):
    tensors = [t if isinstance(t, Tensor) else _as_tensor(t, None) for t in tensors]
    ndim = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} and {t.shape}")
    ax = axis % ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeError("concat: shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    splits = np.cumsum(sizes)[:-1]
    return _emit("concat", tuple(tensors), out, lambda g: tuple(np.split(g, splits, axis=ax)))


def pad_spatial(a, before, after):
    """Zero-pad axes 1 and 2 of a (B, H, W, ...) tensor.

    ``before``/``after`` are (rows, cols) pairs.
    """
    x = a.data
    widths = [(0, 0), (before[0], after[0]), (before[1], after[1])] + [(0, 0)] * (x.ndim - 3)
    out = np.pad(x, widths)
    h, w = x.shape[1], x.shape[2]
    r0, c0 = before
    return _emit("pad_spatial", (a,), out, lambda g: (g[:, r0:r0 + h, c0:c0 + w],))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product.

    ``b`` may be 2-D (shared weight) while ``a`` carries any leading batch
    axes or is a single vector; otherwise both operands must have identical
    leading axes.
    """
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < (1 if bd.ndim == 2 else 2) or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or (
            bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    shared = bd.ndim == 2
    if shared:
        # one large GEMM instead of numpy's loop over small stacked matrices
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = None
        if ra:
            if shared:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
        gb = None
        if rb:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return _emit("matmul", (a, b), out, vjp)


def einsum(subscripts, a, b):
    """Two-operand einsum with explicit output subscripts and no repeated
    indices within an operand."""
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    ad, bd = a.data, b.data
    if len(sa) != ad.ndim or len(sb) != bd.ndim:
        raise ShapeError(f"einsum {subscripts}: operand shapes {ad.shape}, {bd.shape}")
    dims = {}
    for sub_, arr in ((sa, ad), (sb, bd)):
        for ch, n in zip(sub_, arr.shape):
            if dims.setdefault(ch, n) != n:
                raise ShapeError(f"einsum {subscripts}: extent mismatch on '{ch}' ({ad.shape}, {bd.shape})")
    out = np.einsum(f"{sa},{sb}->{out_sub}", ad, bd, optimize=True)
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        # indices summed out of a single operand need broadcasting back
        ga = gb = None
        if ra:
            ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bd, optimize=True) if set(sa) <= set(out_sub + sb) else None
            if ga is None:
                raise ShapeError("einsum: reduction over an index private to one operand is unsupported")
        if rb:
            gb = np.einsum(f"{out_sub},{sa}->{sb}", g, ad, optimize=True) if set(sb) <= set(out_sub + sa) else None
            if gb is None:
                raise ShapeError("einsum: reduction over an index private to one operand is unsupported")
        return ga, gb
    return _emit("einsum", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# composite-but-primitive ops (own VJP for stability or speed)
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _emit("softmax", (a,), out, vjp)


def log_softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return _emit("log_softmax", (a,), out, vjp)


def window_gather(a, k, s):
    """Valid K x K windows with stride S over axes 1, 2 of (B, H, W, ...).

    Returns (B, Ho, Wo, K, K, ...).
    """
    x = a.data
    if x.ndim < 4:
        raise ShapeError(f"window_gather: expected (B, H, W, ...), got {x.shape}")
    b, h, w = x.shape[:3]
    rest = x.shape[3:]
    if k > h or k > w:
        raise ShapeError(f"window_gather: kernel {k} exceeds spatial extent {(h, w)}")
    flat = x.reshape(b, h, w, -1)
    out = accel.window_gather(flat, k, s)
    ho, wo = out.shape[1], out.shape[2]
    out = out.reshape((b, ho, wo, k, k) + rest)

    def vjp(g):
        gf = g.reshape(b, ho, wo, k, k, -1)
        return (accel.window_scatter(gf, h, w, s).reshape(x.shape),)
    return _emit("window_gather", (a,), out, vjp)


def gaussian_mixture(d2, theta1, theta2):
    """sum_q theta1[q] * exp(-d2 / (2 theta2[q]^2)) for 1-D theta of length Q."""
    if theta1.ndim != 1 or theta1.shape != theta2.shape:
        raise ShapeError(f"gaussian_mixture: theta shapes {theta1.shape}, {theta2.shape}")
    dd, t1, t2 = d2.data, theta1.data, theta2.data
    out = accel.gm_forward(dd, t1, t2).astype(dd.dtype, copy=False)

    def vjp(g):
        return accel.gm_backward(g, dd, t1, t2)
    return _emit("gaussian_mixture", (d2, theta1, theta2), out, vjp)


def lstm_cell(z, s_prev):
    """Pointwise LSTM update from pre-activated gates ``z`` (..., 4H), gate
    order (input, forget, output, candidate). Returns (h, s)."""
    hdim = s_prev.shape[-1]
    if z.shape[-1] != 4 * hdim or z.shape[:-1] != s_prev.shape[:-1]:
        raise ShapeError(f"lstm_cell: gate shape {z.shape} vs state shape {s_prev.shape}")
    sp = s_prev.data
    h, s, gates, ts = accel.lstm_forward(z.data, sp)

    def vjp(gs):
        gh, gc = gs
        return accel.lstm_backward(gh, gc, sp, gates, ts)
    return _emit("lstm_cell", (z, s_prev), (h, s), vjp)


def xlogy(x, y):
    """x * log(y) with the convention 0 * log(0) = 0."""
    x, y = _binary("xlogy", x, y)
    xd, yd = x.data, y.data
    if np.any((yd <= 0) & (xd != 0)):
        raise DomainError("xlogy: nonpositive y where x != 0")
    zero = xd == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ly = np.where(zero, 0.0, np.log(np.where(yd > 0, yd, 1.0))).astype(xd.dtype)
        out = np.where(zero, 0.0, xd * ly).astype(xd.dtype)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gy = np.where(zero, 0.0, g * xd / np.where(yd > 0, yd, 1.0)).astype(xd.dtype)
        return _unbroadcast(g * ly, xd.shape), _unbroadcast(gy, yd.shape)
    return _emit("xlogy", (x, y), out, vjp)
