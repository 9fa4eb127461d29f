"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a contiguous numpy
array, a :class:`Tape` records every differentiable operation executed while
it is active, and :func:`backward` replays the tape in exact reverse execution
order to fill gradients. Feature maps use the ``[channel, depth, height,
width]`` layout with the last axis fastest.

Training arithmetic runs in float32. :func:`gradcheck` promotes its input to
float64 and re-runs the same graph, because central differences with a 1e-3
step are unreliable in single precision. Operations preserve the dtype of
their operands, so a float64 input propagates float64 through the whole graph.

All operations are deterministic: identical inputs produce bit-identical
outputs.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import UsageError

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """N-d float array node of an autodiff graph.

    ``data`` is a contiguous float32 or float64 numpy array. ``grad`` stays
    ``None`` until :func:`backward` fills it; it always matches ``data`` in
    shape and dtype. Values are treated as immutable once the tensor has
    entered a graph; only ``grad`` is mutated, and only by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            # numpy reductions hand back 0-d scalars, not ndarrays
            if isinstance(data, (np.ndarray, np.generic)) and \
                    data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            # ascontiguousarray would also promote 0-d scalars to shape (1,)
            arr = np.ascontiguousarray(arr)
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
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars mean python floats, everything else a Tensor.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))


class Tape:
    """Ordered record of the operations executed while the tape was active.

    Used as a context manager; at most one tape may be active per thread.
    Replaying the records back-to-front visits operations in exact reverse
    execution order, which is what :func:`backward` does. Independent tapes
    on separate threads share no state.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        if _active_tape() is not None:
            raise UsageError("a Tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def record(self, out, inputs, vjp):
        """Append one executed operation.

        ``vjp`` maps the gradient at ``out`` to a tuple of gradients aligned
        with ``inputs`` (entries may be None). Exposed so tests can register
        custom operations.
        """
        self._records.append((out, tuple(inputs), vjp))

    def __len__(self):
        return len(self._records)

    def backward(self, output):
        return backward(output, self)


def _record(out, inputs, vjp):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, vjp)


def record_op(out, inputs, vjp):
    """Register a custom operation on the active tape, if one is active.

    Lets callers extend the op set (or deliberately register a broken vjp to
    exercise the checker) without touching engine internals.
    """
    _record(out, inputs, vjp)


def _any_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def backward(output, tape):
    """Fill ``grad`` for every requires_grad tensor reachable from ``output``.

    ``output`` must be a scalar produced on ``tape``. Gradients accumulate
    into existing ``grad`` buffers across repeated calls; call ``zero_grad``
    (or rebuild the tensors) between steps if that is not wanted.
    """
    if output.data.size != 1:
        raise UsageError("backward expects a scalar output")
    flows = {id(output): np.ones_like(output.data)}
    holders = {id(output): output}
    for out, inputs, vjp in reversed(tape._records):
        dout = flows.get(id(out))
        if dout is None:
            continue
        grads = vjp(dout)
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in flows:
                flows[key] += g
            else:
                # own the buffer: vjps are free to return views/shared arrays
                flows[key] = np.array(g, copy=True)
                holders[key] = t
    for key, g in flows.items():
        t = holders[key]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction / shape primitives
# ---------------------------------------------------------------------------

def add(a, b):
    out = Tensor(a.data + b.data, requires_grad=_any_grad(a, b))

    def vjp(dout):
        return _unbroadcast(dout, a.shape), _unbroadcast(dout, b.shape)

    _record(out, (a, b), vjp)
    return out


def add_scalar(a, c):
    out = Tensor(a.data + c, requires_grad=a.requires_grad)
    _record(out, (a,), lambda dout: (dout,))
    return out


def mul(a, b):
    out = Tensor(a.data * b.data, requires_grad=_any_grad(a, b))

    def vjp(dout):
        return (_unbroadcast(dout * b.data, a.shape),
                _unbroadcast(dout * a.data, b.shape))

    _record(out, (a, b), vjp)
    return out


def scale(a, c):
    out = Tensor(a.data * c, requires_grad=a.requires_grad)
    _record(out, (a,), lambda dout: (dout * c,))
    return out


def div(a, b):
    out = Tensor(a.data / b.data, requires_grad=_any_grad(a, b))

    def vjp(dout):
        da = _unbroadcast(dout / b.data, a.shape)
        db = _unbroadcast(-dout * a.data / (b.data * b.data), b.shape)
        return da, db

    _record(out, (a, b), vjp)
    return out


def pow_const(a, exponent):
    out = Tensor(a.data ** exponent, requires_grad=a.requires_grad)

    def vjp(dout):
        return (dout * exponent * a.data ** (exponent - 1.0),)

    _record(out, (a,), vjp)
    return out


def log(a):
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad)
    _record(out, (a,), lambda dout: (dout / a.data,))
    return out


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes only inside the window."""
    out = Tensor(np.clip(a.data, lo, hi), requires_grad=a.requires_grad)
    if out.requires_grad:
        mask = (a.data >= lo) & (a.data <= hi)
        _record(out, (a,), lambda dout: (dout * mask,))
    return out


def tsum(a, axis=None, keepdims=False):
    """Sum over all elements (axis=None, scalar result) or along ``axis``."""
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims),
                 requires_grad=a.requires_grad)

    def vjp(dout):
        g = dout
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    _record(out, (a,), vjp)
    return out


def tmean(a):
    out = Tensor(a.data.mean(), requires_grad=a.requires_grad)
    n = a.data.size

    def vjp(dout):
        return (np.broadcast_to(dout / n, a.shape),)

    _record(out, (a,), vjp)
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    _record(out, (a,), lambda dout: (dout.reshape(a.shape),))
    return out


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_any_grad(*tensors))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(dout):
        return tuple(np.split(dout, splits, axis=axis))

    _record(out, tensors, vjp)
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=a.requires_grad)
    if out.requires_grad:
        mask = a.data > 0
        _record(out, (a,), lambda dout: (dout * mask,))
    return out


def sigmoid(a):
    # split by sign so exp never overflows
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, requires_grad=a.requires_grad)
    _record(out, (a,), lambda dout: (dout * y * (1.0 - y),))
    return out


def softmax_flat(a):
    """Softmax over all elements jointly: one distribution of size a.size.

    Stabilised by max subtraction, so inputs with magnitude up to ~1e4 stay
    finite. Output has the input's shape and sums to 1.
    """
    t = a.data - a.data.max()
    e = np.exp(t)
    y = e / e.sum()
    out = Tensor(y, requires_grad=a.requires_grad)

    def vjp(dout):
        return (y * (dout - (dout * y).sum()),)

    _record(out, (a,), vjp)
    return out


def zeros(shape, dtype=np.float32):
    """Constant zero tensor, detached from any graph."""
    return Tensor(np.zeros(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck(fn, x, step=1e-3):
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` must map one Tensor to a scalar Tensor. The input is promoted to
    float64 and the graph re-runs in double precision; anything ``fn`` closes
    over should tolerate float64 operands (all ops here do). Returns

        max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)

    which stays below ~1e-3 for a correct gradient at the default step and
    sits near 0.5 for a gradient that is wrong by a factor of two.
    """
    if step <= 0:
        raise UsageError("gradcheck step must be positive")
    x64 = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = fn(x64)
    if y.data.size != 1:
        raise UsageError("gradcheck requires fn to produce a scalar")
    backward(y, tape)
    if x64.grad is None:
        analytic = np.zeros(x64.data.size)
    else:
        analytic = x64.grad.reshape(-1).copy()

    flat = x64.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x64).data.reshape(()))
        flat[i] = orig - step
        lo = float(fn(x64).data.reshape(()))
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
