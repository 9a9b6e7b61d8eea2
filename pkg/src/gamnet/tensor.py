"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy float64 array and records the operation
that produced it; ``backward()`` replays the tape in reverse topological
order and accumulates gradients on every tensor with ``requires_grad``.
Repeated ``backward()`` calls keep accumulating until grads are cleared.

Broadcasting is deliberately restricted: two operands are compatible only
when one shape is a suffix of the other (leading-axis expansion, which
covers bias adds and per-row scaling). Anything else raises ShapeError.
"""

import contextlib

import numpy as np

_grad_enabled = True


class ShapeError(ValueError):
    """Raised on incompatible operand shapes, naming the operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        super().__init__(msg)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out = self.data[key]
        if isinstance(out, np.ndarray) and out.base is not None:
            out = out.copy()

        def vjp(g):
            gx = np.zeros_like(self.data)
            gx[key] = g
            return (gx,)

        return _make(out, (self,), vjp)

    # shape ops

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    # reductions

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def backward(self):
        """Accumulate gradients of this scalar into every requires_grad tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _check_suffix(op, sa, sb):
    if sa == sb:
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(op, sa, sb)


def _unbroadcast(g, shape):
    """Sum g over the leading axes that suffix-broadcast expanded."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# elementwise binary ops


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_suffix("add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_suffix("sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_suffix("mul", a.shape, b.shape)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_suffix("div", a.shape, b.shape)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def maximum(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_suffix("maximum", a.shape, b.shape)
    out = np.maximum(a.data, b.data)
    mask = (a.data >= b.data).astype(np.float64)
    mask = np.broadcast_to(mask, out.shape)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * mask, a.shape),
                            _unbroadcast(g * (1.0 - mask), b.shape)))


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    ok = (a.ndim == 2 and b.ndim == 2) or (a.ndim > 2 and b.ndim == 2)
    if not ok or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


# elementwise unary ops


def neg(a):
    a = _coerce(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _coerce(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = _coerce(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _coerce(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    a = _coerce(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a):
    a = _coerce(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    with np.errstate(over="ignore"):
        pos = 1.0 / (1.0 + np.exp(-x))
        ex = np.exp(x)
        negv = ex / (1.0 + ex)
    return np.where(x >= 0, pos, negv)


def sigmoid(a):
    a = _coerce(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = _coerce(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),))


def relu(a):
    a = _coerce(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def softmax(a, axis):
    """Numerically stable softmax along a named axis."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (a,), vjp)


def layer_norm(a, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _coerce(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError("layer_norm", a.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _make(out, (a,), vjp)


def huber(pred, target, delta):
    """Elementwise Huber kernel on the residual pred - target."""
    pred, target = _coerce(pred), _coerce(target)
    if pred.shape != target.shape:
        raise ShapeError("huber", pred.shape, target.shape)
    if delta <= 0:
        raise ValueError(f"huber: delta must be positive, got {delta}")
    e = pred.data - target.data
    out = np.where(np.abs(e) <= delta, 0.5 * e * e, delta * (np.abs(e) - 0.5 * delta))
    de = np.clip(e, -delta, delta)
    return _make(out, (pred, target), lambda g: (g * de, -g * de))


# structural ops


def reshape(a, shape):
    a = _coerce(a)
    old = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(np.transpose(a.data, axes).copy(), (a,),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def take(a, idx, axis=0):
    """Gather rows along axis 0 by an integer index array."""
    if axis != 0:
        raise ValueError("take: only axis 0 is supported")
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take: index out of range for axis of size {a.shape[0]}")

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), vjp)


def repeat(a, reps, axis):
    """Repeat each slice along `axis` `reps` times (consecutive blocks)."""
    a = _coerce(a)
    out = np.repeat(a.data, reps, axis=axis)
    mid = a.shape[axis]

    def vjp(g):
        shp = g.shape[:axis] + (mid, reps) + g.shape[axis + 1:]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _make(out, (a,), vjp)


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of `a` into `num_segments` buckets keyed by segment_ids."""
    a = _coerce(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ShapeError("segment_sum", a.shape, seg.shape)
    out = np.zeros((num_segments,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, seg, a.data)
    return _make(out, (a,), lambda g: (g[seg],))


def cumsum(a, axis):
    a = _coerce(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), vjp)


def scan(decay, x):
    """Linear recurrence h[t] = decay[t] * h[t-1] + x[t] along axis 0, h[-1] = 0.

    Evaluated with a chunk-doubling associative scan (log-depth sweeps), so
    the float operation order differs from the naive step loop.
    """
    decay, x = _coerce(decay), _coerce(x)
    if decay.shape != x.shape:
        raise ShapeError("scan", decay.shape, x.shape)
    if decay.ndim < 1 or decay.shape[0] < 1:
        raise ValueError("scan: sequence axis must have length >= 1")
    h = _doubling_scan(decay.data, x.data)

    def vjp(g):
        length = g.shape[0]
        # s[t] = g[t] + decay[t+1] * s[t+1], evaluated as a reversed scan
        # with multiplier e[u] = decay[L-u] (e[0] unused).
        e = np.zeros_like(decay.data)
        if length > 1:
            e[1:] = decay.data[:0:-1]
        s = _doubling_scan(e, g[::-1].copy())[::-1].copy()
        h_prev = np.zeros_like(h)
        h_prev[1:] = h[:-1]
        return (s * h_prev, s)

    return _make(h, (decay, x), vjp)


def _doubling_scan(d, x):
    h = x.copy()
    dp = d.copy()
    off = 1
    length = d.shape[0]
    while off < length:
        h[off:] = h[off:] + dp[off:] * h[:-off]
        dp[off:] = dp[off:] * dp[:-off]
        off *= 2
    return h


# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = _coerce(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _coerce(a)
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, a.shape).copy() / count,)

    return _make(out, (a,), vjp)


def tmax(a, axis=None, keepdims=False):
    a = _coerce(a)
    if axis is None:
        out = a.data.max()
        flat_idx = int(np.argmax(a.data))

        def vjp(g):
            ga = np.zeros_like(a.data)
            ga.flat[flat_idx] = float(np.asarray(g).reshape(()))
            return (ga,)

        return _make(out, (a,), vjp)
    ax = axis % a.ndim
    out = a.data.max(axis=ax, keepdims=keepdims)
    idx = np.argmax(a.data, axis=ax)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, ax), gg, axis=ax)
        return (ga,)

    return _make(out, (a,), vjp)


def finite_difference_check(f, x, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor and must be deterministic. Returns
    max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError("finite_difference_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        raise ValueError("finite_difference_check: f(x) is not finite")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    numeric = np.zeros_like(leaf.data)
    with no_grad():
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(leaf).data.reshape(()))
            flat[i] = orig - step
            fm = float(f(leaf).data.reshape(()))
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max())
