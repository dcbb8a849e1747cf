"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the integer flow needs are provided: elementwise
arithmetic and activations, channel slicing/concatenation, reshapes,
1x1/3x3 convolutions, the straight-through rounding, and a couple of
fused likelihood primitives with analytic derivatives.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block).  Outside a tape nothing is recorded, which is how
inference runs.
"""
from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit


class NonFiniteError(ValueError):
    pass


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Real-valued array that may participate in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)


class Parameter:
    """Trainable array with a gradient slot and a stable name."""

    def __init__(self, value, name=""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def tensor(self, dtype=np.float64):
        """Leaf tensor of this parameter in `dtype`, tracked by the active tape."""
        tape = _active_tape()
        t = Tensor(self.value.astype(dtype, copy=False), requires_grad=tape is not None)
        if tape is not None:
            tape.leaves.append((self, t))
        return t

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    >>> with Tape() as tape:
    ...     loss = total(p.tensor() * 2.0)
    >>> backward(tape, loss)
    """

    def __init__(self):
        self.nodes = []
        self.leaves = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Suspend recording inside a tape (used by evaluation paths)."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()
        return False


def _record(out, parents, backward_fn):
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite value in tensor operation")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    _check_broadcast(a, b)
    _check_finite(a.data, b.data)
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    _check_broadcast(a, b)
    _check_finite(a.data, b.data)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), back)


def neg(a):
    a = _wrap(a)
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def exp(a):
    _check_finite(a.data)
    y = np.exp(a.data)
    return _record(Tensor(y), (a,), lambda g: (g * y,))


def log(a):
    _check_finite(a.data)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    x = a.data
    return _record(Tensor(np.log(x)), (a,), lambda g: (g / x,))


def sigmoid(a):
    a = _wrap(a)
    _check_finite(a.data)
    y = expit(a.data)
    return _record(Tensor(y), (a,), lambda g: (g * y * (1 - y),))


def relu(a):
    _check_finite(a.data)
    mask = a.data > 0
    return _record(Tensor(a.data * mask), (a,), lambda g: (g * mask,))


def softplus(a):
    _check_finite(a.data)
    x = a.data
    y = np.logaddexp(0, x).astype(x.dtype, copy=False)
    return _record(Tensor(y), (a,), lambda g: (g * expit(x),))


def round_half_away(x):
    """Nearest integer, ties away from zero.  Exact for every float input."""
    x = np.asarray(x)
    r = np.trunc(x)
    frac = x - r
    return r + np.sign(x) * (np.abs(frac) >= 0.5)


class identity_rounding:
    """Within this block :func:`round_ste` returns its input unchanged.

    Used to check model gradients against finite differences, which the
    piecewise-constant rounding would otherwise make meaningless.
    """

    def __enter__(self):
        self._prev = getattr(_local, "identity_round", False)
        _local.identity_round = True
        return self

    def __exit__(self, *exc):
        _local.identity_round = self._prev
        return False


def round_ste(a):
    """Round to nearest (ties away from zero); gradient passes straight through."""
    _check_finite(a.data)
    if getattr(_local, "identity_round", False):
        return _record(Tensor(a.data), (a,), lambda g: (g,))
    y = round_half_away(a.data).astype(a.dtype, copy=False)
    return _record(Tensor(y), (a,), lambda g: (g,))


# -- reductions and reshaping ------------------------------------------------

def total(a):
    shape = a.shape
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axes(a, axis):
    shape = a.shape
    out = Tensor(a.data.sum(axis=axis, keepdims=True))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    return total(a) * (1.0 / a.data.size)


def reshape(a, shape):
    old = a.shape
    return _record(Tensor(a.data.reshape(shape)), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _record(Tensor(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def take(a, index):
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(Tensor(a.data[index]), (a,), back)


def _is_fancy(index):
    if not isinstance(index, tuple):
        index = (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in index)


def channels(a, start, stop):
    """Slice channels [start, stop) of an (N, C, H, W) tensor."""
    return take(a, (slice(None), slice(start, stop)))


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum(sizes)[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def cast(a, dtype):
    src = a.dtype
    return _record(Tensor(a.data.astype(dtype)), (a,), lambda g: (g.astype(src),))


# -- convolution ---------------------------------------------------------------

def conv2d(x, weight, bias=None):
    """Same-padded 2-d convolution of (N, C, H, W) input with (O, C, k, k) kernel, k in {1, 3}.

    A (C, H, W) input is treated as a batch of one and returned unbatched.
    """
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}")
    y = transpose(conv2d_nhwc(transpose(x, (0, 2, 3, 1)), weight, bias), (0, 3, 1, 2))
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d_nhwc(x, weight, bias=None):
    """Channels-last variant of :func:`conv2d`; the networks run in this layout."""
    n, h, w, c = x.shape
    o, ci, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"unsupported kernel size {kh}x{kw}")
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    _check_finite(x.data)
    xd = x.data
    if kh == 1:
        wm = weight.data.reshape(o, c)
        cols = xd.reshape(-1, c)
    else:
        # column order (ky, kx, c) matches the weight transpose below
        wm = weight.data.transpose(0, 2, 3, 1).reshape(o, 9 * c)
        xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)],
                              axis=-1).reshape(-1, 9 * c)
    y = cols @ wm.T
    if bias is not None:
        y += bias.data
    out = Tensor(y.reshape(n, h, w, o))

    def back(g):
        gt = g.reshape(-1, o)
        gw = gt.T @ cols
        gw = gw.reshape(o, c, 1, 1) if kh == 1 else gw.reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
        gc = gt @ wm
        if kh == 1:
            gx = gc.reshape(n, h, w, c)
        else:
            gc = gc.reshape(n, h, w, 9 * c)
            gxp = np.zeros((n, h + 2, w + 2, c), dtype=gc.dtype)
            k = 0
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + h, j:j + w, :] += gc[..., k * c:(k + 1) * c]
                    k += 1
            gx = gxp[:, 1:-1, 1:-1, :]
        grads = (gx, gw)
        if bias is not None:
            grads += (gt.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, back)


# -- likelihood primitives -----------------------------------------------------

def _log_diff_sigmoid(a, b):
    """log(sigmoid(b) - sigmoid(a)) for b > a, stable in both tails."""
    flip = (a + b) > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lhi = log_expit(hi)
    llo = log_expit(lo)
    d = llo - lhi  # < 0
    return lhi + np.log(-np.expm1(d))


def dlogistic_logpmf_arrays(z, mu, s):
    """Elementwise log DLogistic(z | mu, s) on plain arrays."""
    return _log_diff_sigmoid((z - 0.5 - mu) / s, (z + 0.5 - mu) / s)


def dlogistic_logpmf(z, mu, s):
    """Differentiable elementwise log pmf of the discretized logistic.

    Gradients flow to all three arguments; the derivative with respect
    to ``z`` is taken as the continuous one (needed for the straight-through
    path, where ``z`` depends on network outputs).
    """
    z, mu, s = _wrap(z), _wrap(mu), _wrap(s)
    _check_finite(z.data, mu.data, s.data)
    a = (z.data - 0.5 - mu.data) / s.data
    b = (z.data + 0.5 - mu.data) / s.data
    logp = _log_diff_sigmoid(a, b)
    out = Tensor(logp.astype(np.result_type(z.dtype, mu.dtype, s.dtype), copy=False))
    sd = s.data

    def back(g):
        # dlog(sig(b) - sig(a)) = (sig'(b) db - sig'(a) da) / D, in log space
        ra = np.exp(log_expit(a) + log_expit(-a) - logp)
        rb = np.exp(log_expit(b) + log_expit(-b) - logp)
        dmu = -(rb - ra) / sd
        ds = -(b * rb - a * ra) / sd
        return (_unbroadcast(-g * dmu, z.shape), _unbroadcast(g * dmu, mu.shape),
                _unbroadcast(g * ds, s.shape))

    return _record(out, (z, mu, s), back)


def logsumexp(a, axis):
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    y = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    w = np.exp(x - y)
    return _record(Tensor(y), (a,), lambda g: (g * w,))


def log_softmax(a, axis):
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    y = x - (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)))
    p = np.exp(y)
    return _record(Tensor(y), (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- backward ------------------------------------------------------------------

def backward(tape, loss, params=None):
    """Propagate d(loss) back through `tape` and write parameter gradients.

    Every parameter touched on the tape (and every entry of `params`) has its
    ``grad`` overwritten; parameters the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    on_tape = any(node.out is loss for node in tape.nodes) or any(t is loss for _, t in tape.leaves)
    if not on_tape:
        raise ValueError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    touched = {}
    for p, t in tape.leaves:
        g = grads.get(id(t))
        if g is not None:
            g = g.astype(np.float64)
            touched[id(p)] = touched[id(p)] + g if id(p) in touched else g
        else:
            touched.setdefault(id(p), None)
    seen = {id(p): p for p, _ in tape.leaves}
    for p in params or ():
        seen.setdefault(id(p), p)
        touched.setdefault(id(p), None)
    for key, p in seen.items():
        g = touched.get(key)
        p.grad = np.zeros_like(p.value) if g is None else g.reshape(p.value.shape)


def finite_diff_grad(f, p, h=1e-5):
    """Central-difference gradient of scalar ``f()`` with respect to parameter ``p``."""
    grad = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
