"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tape records primitive ops in creation order; grad() replays it backwards.
Backward closures are written with the same dual-mode functions as the
forward ops, so calling grad(..., create_graph=True) records the backward
pass itself and second derivatives (e.g. through unrolled inner optimization
steps) come out of a second grad() call.

All dual-mode functions in this module accept either Tensor or ndarray
arguments and return the matching kind, which lets geometry code (signed
distance functions, field features) run on plain numpy when no gradients
are needed.
"""

from __future__ import annotations

import struct
import threading
import warnings

import numpy as np

_EPS = 1e-12

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tape:
    """Ordered record of primitive ops; single-writer, one backward visit per node."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _record(self, tensor):
        tensor._idx = len(self.nodes)
        self.nodes.append(tensor)

    def grad(self, output, wrt, create_graph=False, warn_disconnected=True):
        """d(output)/d(each wrt tensor); returns one array/Tensor per entry.

        output must be a scalar Tensor recorded on this tape. Disconnected
        wrt entries get zeros (and a warning unless suppressed).
        """
        if not isinstance(output, Tensor):
            raise TypeError("grad output must be a Tensor")
        if output.data.size != 1:
            raise ValueError("grad output must be scalar")

        if create_graph:
            val = lambda t: t
            seed = constant(np.ones_like(output.data))
        else:
            val = lambda t: t.data
            seed = np.ones_like(output.data)

        wrt_ids = {id(w) for w in wrt}
        cot = {id(output): seed}
        keep = {id(output): output}
        start = output._idx
        # Reverse scan; nodes appended by create_graph vjps land above `start`
        # and are never revisited in this pass.
        for i in range(start, -1, -1):
            node = self.nodes[i]
            g = cot.get(id(node))
            if g is None:
                continue
            if id(node) not in wrt_ids:
                del cot[id(node)]
                keep.pop(id(node), None)
            if not node._parents:
                continue
            for parent, vjp in node._parents:
                if not parent.requires_grad:
                    continue
                contrib = vjp(g, val)
                prev = cot.get(id(parent))
                cot[id(parent)] = contrib if prev is None else prev + contrib
                keep[id(parent)] = parent
        out = []
        for w in wrt:
            g = cot.get(id(w))
            if g is None:
                if warn_disconnected:
                    warnings.warn("grad: wrt tensor not reached from output; returning zeros")
                g = constant(np.zeros_like(w.data)) if create_graph else np.zeros_like(w.data)
            out.append(g)
        return out


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_idx")

    # Make ndarray <op> Tensor defer to the reflected Tensor operators.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._idx = -1
        if requires_grad:
            tape = active_tape()
            if tape is not None:
                tape._record(self)

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic operators route through the dual-mode functions below.
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def constant(data):
    return Tensor(data)


def _is_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents):
    """Create an op output; records on the active tape when grads can flow."""
    tape = active_tape()
    live = [(p, vjp) for p, vjp in parents if isinstance(p, Tensor) and p.requires_grad]
    if tape is None or not live:
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(live)
    return out


def unbroadcast(g, shape, _v=None):
    """Sum-reduce g (array or Tensor) back to `shape` after numpy broadcasting."""
    gshape = g.shape
    if gshape == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return reshape(g, shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    if not _is_tensor(a, b):
        return np.add(_data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data + b.data, [
        (a, lambda g, v: unbroadcast(g, sa)),
        (b, lambda g, v: unbroadcast(g, sb)),
    ])


def sub(a, b):
    if not _is_tensor(a, b):
        return np.subtract(_data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data - b.data, [
        (a, lambda g, v: unbroadcast(g, sa)),
        (b, lambda g, v: unbroadcast(neg(g), sb)),
    ])


def neg(a):
    if not _is_tensor(a):
        return -_data(a)
    return _make(-a.data, [(a, lambda g, v: neg(g))])


def mul(a, b):
    if not _is_tensor(a, b):
        return np.multiply(_data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data * b.data, [
        (a, lambda g, v: unbroadcast(mul(g, v(b)), sa)),
        (b, lambda g, v: unbroadcast(mul(g, v(a)), sb)),
    ])


def div(a, b):
    if not _is_tensor(a, b):
        return np.divide(_data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data / b.data, [
        (a, lambda g, v: unbroadcast(div(g, v(b)), sa)),
        (b, lambda g, v: unbroadcast(neg(div(mul(g, v(a)), mul(v(b), v(b)))), sb)),
    ])


def matmul(a, b):
    if not _is_tensor(a, b):
        return np.matmul(_data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape

    def vjp_a(g, v):
        return unbroadcast(matmul(g, swapaxes(v(b), -1, -2)), sa)

    def vjp_b(g, v):
        return unbroadcast(matmul(swapaxes(v(a), -1, -2), g), sb)

    return _make(a.data @ b.data, [(a, vjp_a), (b, vjp_b)])


def sum_(a, axis=None, keepdims=False):
    if not _is_tensor(a):
        return _data(a).sum(axis=axis, keepdims=keepdims)
    sa = a.data.shape

    def vjp(g, v):
        if axis is None:
            return broadcast_to(reshape(g, (1,) * len(sa)), sa)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            shape = list(sa)
            for ax in sorted(ax % len(sa) for ax in axes):
                shape[ax] = 1
            g = reshape(g, tuple(shape))
        return broadcast_to(g, sa)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    if not _is_tensor(a):
        return np.mean(_data(a), axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    if not _is_tensor(a):
        return np.reshape(_data(a), shape)
    sa = a.data.shape
    return _make(np.reshape(a.data, shape), [(a, lambda g, v: reshape(g, sa))])


def swapaxes(a, ax1, ax2):
    if not _is_tensor(a):
        return np.swapaxes(_data(a), ax1, ax2)
    return _make(np.swapaxes(a.data, ax1, ax2), [(a, lambda g, v: swapaxes(g, ax1, ax2))])


def broadcast_to(a, shape):
    if not _is_tensor(a):
        return np.broadcast_to(_data(a), shape)
    sa = a.data.shape
    return _make(np.broadcast_to(a.data, shape).copy(), [(a, lambda g, v: unbroadcast(g, sa))])


def concat(parts, axis=0):
    if not _is_tensor(*parts):
        return np.concatenate([_data(p) for p in parts], axis=axis)
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g, v):
            sl = [slice(None)] * len(parts[i].data.shape)
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return getitem(g, tuple(sl))
        return vjp

    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 [(p, make_vjp(i)) for i, p in enumerate(parts)])


def stack(parts, axis=0):
    if not _is_tensor(*parts):
        return np.stack([_data(p) for p in parts], axis=axis)
    parts = [_wrap(p) for p in parts]

    def make_vjp(i):
        def vjp(g, v):
            sl = [slice(None)] * (len(parts[i].data.shape) + 1)
            sl[axis] = i
            return getitem(g, tuple(sl))
        return vjp

    return _make(np.stack([p.data for p in parts], axis=axis),
                 [(p, make_vjp(i)) for i, p in enumerate(parts)])


def getitem(a, idx):
    if not _is_tensor(a):
        return _data(a)[idx]
    sa = a.data.shape
    return _make(a.data[idx], [(a, lambda g, v: scatter_add(g, idx, sa))])


def _is_basic_index(idx):
    if isinstance(idx, tuple):
        return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None
                   for i in idx)
    return isinstance(idx, (slice, int, np.integer)) or idx is Ellipsis


def scatter_add(g, idx, shape):
    """Adjoint of getitem: place g into zeros(shape) at idx (accumulating).

    Basic slices cannot alias, so they use plain assignment; advanced integer
    indexing accumulates duplicates via ufunc.at.
    """
    if not _is_tensor(g):
        out = np.zeros(shape)
        if _is_basic_index(idx):
            out[idx] = _data(g)
        else:
            np.add.at(out, idx, _data(g))
        return out
    data = np.zeros(shape)
    if _is_basic_index(idx):
        data[idx] = g.data
    else:
        np.add.at(data, idx, g.data)
    return _make(data, [(g, lambda gg, v: getitem(gg, idx))])


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    if not _is_tensor(a, b):
        return np.where(cond, _data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape
    mask = cond.astype(np.float64)
    return _make(np.where(cond, a.data, b.data), [
        (a, lambda g, v: unbroadcast(mul(g, mask), sa)),
        (b, lambda g, v: unbroadcast(mul(g, 1.0 - mask), sb)),
    ])


def maximum(a, b):
    if not _is_tensor(a, b):
        return np.maximum(_data(a), _data(b))
    mask = _data(a) >= _data(b)
    return where(mask, a, b)


def minimum(a, b):
    if not _is_tensor(a, b):
        return np.minimum(_data(a), _data(b))
    mask = _data(a) <= _data(b)
    return where(mask, a, b)


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def abs_(a):
    if not _is_tensor(a):
        return np.abs(_data(a))
    s = np.sign(a.data)
    return _make(np.abs(a.data), [(a, lambda g, v: mul(g, s))])


def sign(a):
    # Piecewise constant; gradient is zero almost everywhere.
    return np.sign(_data(a))


def sqrt(a):
    if not _is_tensor(a):
        return np.sqrt(_data(a))
    out_data = np.sqrt(a.data)

    def vjp(g, v):
        if isinstance(g, Tensor):
            return mul(g, div(0.5, maximum(sqrt(v(a)), _EPS)))
        return g * (0.5 / np.maximum(out_data, _EPS))

    return _make(out_data, [(a, vjp)])


def exp(a):
    if not _is_tensor(a):
        return np.exp(_data(a))
    out_data = np.exp(a.data)

    def vjp(g, v):
        if isinstance(g, Tensor):
            return mul(g, exp(v(a)))
        return g * out_data

    return _make(out_data, [(a, vjp)])


def log(a):
    if not _is_tensor(a):
        return np.log(_data(a))
    return _make(np.log(a.data), [(a, lambda g, v: div(g, v(a)))])


def sin(a):
    if not _is_tensor(a):
        return np.sin(_data(a))
    return _make(np.sin(a.data), [(a, lambda g, v: mul(g, cos(v(a))))])


def cos(a):
    if not _is_tensor(a):
        return np.cos(_data(a))
    return _make(np.cos(a.data), [(a, lambda g, v: neg(mul(g, sin(v(a)))))])


def atan2(y, x):
    if not _is_tensor(y, x):
        return np.arctan2(_data(y), _data(x))
    y, x = _wrap(y), _wrap(x)
    sy, sx = y.data.shape, x.data.shape

    def vjp_y(g, v):
        yy, xx = v(y), v(x)
        return unbroadcast(div(mul(g, xx), add(mul(xx, xx), mul(yy, yy))), sy)

    def vjp_x(g, v):
        yy, xx = v(y), v(x)
        return unbroadcast(neg(div(mul(g, yy), add(mul(xx, xx), mul(yy, yy)))), sx)

    return _make(np.arctan2(y.data, x.data), [(y, vjp_y), (x, vjp_x)])


def sigmoid(a):
    if not _is_tensor(a):
        return 1.0 / (1.0 + np.exp(-_data(a)))
    s = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g, v):
        if isinstance(g, Tensor):
            ss = sigmoid(v(a))
            return mul(g, mul(ss, sub(1.0, ss)))
        return g * (s * (1.0 - s))

    return _make(s, [(a, vjp)])


def swish(a):
    """x * sigmoid(x); smooth activation with continuous gradients."""
    if not _is_tensor(a):
        d = _data(a)
        return d / (1.0 + np.exp(-d))
    return mul(a, sigmoid(a))


def leaky_relu(a, slope=0.2):
    if not _is_tensor(a):
        d = _data(a)
        return np.where(d >= 0, d, slope * d)
    mask = a.data >= 0
    fac = np.where(mask, 1.0, slope)
    return _make(np.where(mask, a.data, slope * a.data), [(a, lambda g, v: mul(g, fac))])


def l1_norm(a):
    """Sum of absolute values over all elements."""
    return sum_(abs_(a))


def l2_norm_sq(a):
    """Sum of squares over all elements."""
    return sum_(mul(a, a))


def inner_product(a, b):
    """Elementwise product summed over the last axis."""
    return sum_(mul(a, b), axis=-1)


def norm(a, axis=-1, keepdims=False, eps=0.0):
    """Euclidean norm along an axis; eps guards the sqrt for normalization."""
    return sqrt(sum_(mul(a, a), axis=axis, keepdims=keepdims) + eps)


# ---------------------------------------------------------------------------
# fused ops (hand-simplified vjps for the geometry hot loop)


def relu(a):
    if not _is_tensor(a):
        return np.maximum(_data(a), 0.0)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, [(a, lambda g, v: mul(g, mask))])


def sumsq_last(a):
    """Sum of squares over the last axis."""
    if not _is_tensor(a):
        d = _data(a)
        return np.einsum("...i,...i->...", d, d)

    def vjp(g, v):
        av = v(a)
        if isinstance(g, Tensor) or isinstance(av, Tensor):
            return mul(reshape(g, g.shape + (1,)), mul(av, 2.0))
        return g[..., None] * (2.0 * av)

    return _make(np.einsum("...i,...i->...", a.data, a.data), [(a, vjp)])


def norm_last(a, eps=1e-300):
    """Euclidean norm over the last axis; eps keeps the origin differentiable."""
    if not _is_tensor(a):
        d = _data(a)
        return np.sqrt(np.einsum("...i,...i->...", d, d) + eps)
    out_data = np.sqrt(np.einsum("...i,...i->...", a.data, a.data) + eps)

    def vjp(g, v):
        av = v(a)
        if isinstance(g, Tensor) or isinstance(av, Tensor):
            n = norm_last(av, eps)
            return mul(reshape(div(g, n), g.shape + (1,)), av)
        return (g / out_data)[..., None] * av

    return _make(out_data, [(a, vjp)])


def dot_last(a, b):
    """Inner product over the last axis (broadcasting leading dims)."""
    if not _is_tensor(a, b):
        return np.einsum("...i,...i->...", _data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape

    def vjp_a(g, v):
        bv = v(b)
        if isinstance(g, Tensor) or isinstance(bv, Tensor):
            return unbroadcast(mul(reshape(g, g.shape + (1,)), bv), sa)
        return unbroadcast(g[..., None] * bv, sa)

    def vjp_b(g, v):
        av = v(a)
        if isinstance(g, Tensor) or isinstance(av, Tensor):
            return unbroadcast(mul(reshape(g, g.shape + (1,)), av), sb)
        return unbroadcast(g[..., None] * av, sb)

    return _make(np.einsum("...i,...i->...", a.data, b.data), [(a, vjp_a), (b, vjp_b)])


def scale_last(a, s):
    """a * s[..., None]: scale vectors by per-row scalars."""
    if not _is_tensor(a, s):
        return _data(a) * _data(s)[..., None]
    a, s = _wrap(a), _wrap(s)
    sa, ss = a.data.shape, s.data.shape

    def vjp_a(g, v):
        sv = v(s)
        if isinstance(g, Tensor) or isinstance(sv, Tensor):
            return unbroadcast(mul(g, reshape(sv, sv.shape + (1,))), sa)
        return unbroadcast(g * sv[..., None], sa)

    def vjp_s(g, v):
        av = v(a)
        if isinstance(g, Tensor) or isinstance(av, Tensor):
            return unbroadcast(sum_(mul(g, av), axis=-1), ss)
        return unbroadcast(np.einsum("...i,...i->...", g, av), ss)

    return _make(a.data * s.data[..., None], [(a, vjp_a), (s, vjp_s)])


def max_last(a):
    """Max over the last axis; subgradient flows to the argmax entry."""
    if not _is_tensor(a):
        return _data(a).max(axis=-1)
    idx = np.argmax(a.data, axis=-1)
    lead = tuple(np.indices(idx.shape))
    full_idx = lead + (idx,)

    def vjp(g, v):
        if isinstance(g, Tensor):
            return scatter_add(g, full_idx, a.data.shape)
        out = np.zeros(a.data.shape)
        out[full_idx] = g  # one argmax per row: positions are unique
        return out

    return _make(a.data.max(axis=-1), [(a, vjp)])


def cross(a, b):
    """Cross product over the last axis (size 3)."""
    if not _is_tensor(a, b):
        return np.cross(_data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape

    def vjp_a(g, v):
        bv = v(b)
        if isinstance(g, Tensor) or isinstance(bv, Tensor):
            return unbroadcast(cross(bv, g), sa)
        return unbroadcast(np.cross(bv, g), sa)

    def vjp_b(g, v):
        av = v(a)
        if isinstance(g, Tensor) or isinstance(av, Tensor):
            return unbroadcast(cross(g, av), sb)
        return unbroadcast(np.cross(g, av), sb)

    return _make(np.cross(a.data, b.data), [(a, vjp_a), (b, vjp_b)])


def hypot(a, b):
    """sqrt(a^2 + b^2), smooth except at the origin."""
    if not _is_tensor(a, b):
        return np.hypot(_data(a), _data(b))
    a, b = _wrap(a), _wrap(b)
    out_data = np.hypot(a.data, b.data)
    safe = np.maximum(out_data, 1e-300)

    def make_vjp(which):
        def vjp(g, v):
            xv = v(which)
            if isinstance(g, Tensor) or isinstance(xv, Tensor):
                h = maximum(hypot(v(a), v(b)), 1e-300)
                return div(mul(g, xv), h)
            return g * (xv / safe)
        return vjp

    return _make(out_data, [(a, make_vjp(a)), (b, make_vjp(b))])


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update on a list of ndarrays.

    state is a dict with keys m, v, t (created on first call); returns
    (new_params, state). Pure numpy: optimizer state is never differentiated.
    """
    if not state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _data(g)
        state["m"][i] = beta1 * state["m"][i] + (1 - beta1) * g
        state["v"][i] = beta2 * state["v"][i] + (1 - beta2) * g * g
        mh = state["m"][i] / (1 - beta1 ** t)
        vh = state["v"][i] / (1 - beta2 ** t)
        out.append(p - lr * mh / (np.sqrt(vh) + eps))
    return out, state


# ---------------------------------------------------------------------------
# weight checkpoint container

_MAGIC = b"DFW1"
_VERSION = 1


def save_weights(path, named_arrays):
    """Flat binary container: header, then per-tensor name/dims/float64 data."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a weight container")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported container version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = data.astype(np.float64)
        return out
