"""Minimal reverse-mode autodiff on dense numpy arrays.

Every differentiable operation appends one record to a global tape;
``backward`` replays the tape in exact reverse creation order, which is a
topological order by construction and keeps gradient accumulation
deterministic. Leaf tensors with ``requires_grad`` accumulate into ``.grad``
across calls; intermediate gradients live only for the duration of one
backward pass.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatch(ValueError):
    pass


class HeadDivisibility(ValueError):
    pass


class AllMasked(ValueError):
    """A softmax row has no feasible entry."""

    def __init__(self, row):
        self.row = row
        super().__init__(f"no feasible entry in row {row}")


class NonPositiveTemperature(ValueError):
    pass


class NotScalar(ValueError):
    pass


class DetachedLoss(ValueError):
    pass


class Tape:
    """Ordered list of op records; cleared between training steps."""

    def __init__(self):
        self.nodes = []
        self.enabled = True

    def reset(self):
        self.nodes.clear()


_tape = Tape()


def tape_size():
    return len(_tape.nodes)


def reset_tape():
    _tape.reset()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forward values are still computed."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def grad_enabled():
    return _tape.enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_on_tape")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if requires_grad and arr.dtype.type not in FLOAT_DTYPES:
            raise TypeError(f"requires_grad needs a float dtype, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._on_tape = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are promoted to constants
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _record(out, parents, backward_fn):
    """Attach a backward record to ``out`` if recording and any parent needs grad."""
    if _tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._on_tape = True
        _tape.nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss):
    """Accumulate d(loss)/d(p) into every reachable leaf with requires_grad.

    Repeated calls without zeroing accumulate additively. Intermediate
    gradients are recomputed fresh on each call.
    """
    if not isinstance(loss, Tensor):
        raise NotScalar("loss must be a Tensor")
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad or loss._backward is None:
        raise DetachedLoss("loss does not depend on any tracked parameter")

    try:
        idx = len(_tape.nodes) - 1 - _tape.nodes[::-1].index(loss)
    except ValueError:
        raise DetachedLoss("loss is not on the active tape") from None

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_tape.nodes[: idx + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, contrib in node._backward(g):
            if not parent.requires_grad:
                continue
            contrib = np.ascontiguousarray(contrib, dtype=parent.data.dtype)
            if parent._on_tape:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
            else:  # leaf parameter: persistent accumulation
                if parent.grad is None:
                    parent.grad = contrib.copy()
                else:
                    parent.grad += contrib


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def back(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _record(out, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def back(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _record(out, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def back(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _record(out, (a, b), back)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (
            (a, _unbroadcast(ga, a.data.shape)),
            (b, _unbroadcast(gb, b.data.shape)),
        )

    return _record(out, (a, b), back)


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def back(g):
        return ((a, g / a.data),)

    return _record(out, (a,), back)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def back(g):
        return ((a, g * out.data),)

    return _record(out, (a,), back)


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def back(g):
        return ((a, g * (1.0 - out.data * out.data)),)

    return _record(out, (a,), back)


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def back(g):
        return ((a, g * (a.data > 0)),)

    return _record(out, (a,), back)


def rsqrt(a):
    a = as_tensor(a)
    out = Tensor(1.0 / np.sqrt(a.data))

    def back(g):
        return ((a, g * (-0.5) * out.data / a.data),)

    return _record(out, (a,), back)


def xlogx(a):
    """x*log(x) with the 0*log(0)=0 convention; used for entropies."""
    a = as_tensor(a)
    pos = a.data > 0
    logdata = np.where(pos, np.log(np.where(pos, a.data, 1.0)), 0.0)
    out = Tensor(np.where(pos, a.data * logdata, 0.0))

    def back(g):
        return ((a, np.where(pos, g * (logdata + 1.0), 0.0)),)

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def back(g):
        return ((a, g.reshape(a.data.shape)),)

    return _record(out, (a,), back)


def transpose(a, axes):
    a = as_tensor(a)
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    inv = np.argsort(axes)

    def back(g):
        return ((a, np.transpose(g, inv)),)

    return _record(out, (a,), back)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(parts, pieces))

    return _record(out, tuple(parts), back)


def gather(a, index, axis):
    """take_along_axis with gradient scatter-add into the source."""
    a = as_tensor(a)
    idx = np.asarray(index)
    if idx.ndim != a.data.ndim:
        raise ShapeMismatch(f"gather index ndim {idx.ndim} != input ndim {a.data.ndim}")
    out = Tensor(np.take_along_axis(a.data, idx, axis=axis))

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, 0.0, axis=axis)  # shape check
        # accumulate (indices may repeat)
        grid = np.meshgrid(*[np.arange(s) for s in idx.shape], indexing="ij")
        full = list(grid)
        full[axis] = idx
        np.add.at(ga, tuple(full), g)
        return ((a, ga),)

    return _record(out, (a,), back)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape).copy()),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.data.shape).copy()),)

    return _record(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))

    def back(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, a.data.shape).copy()),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g / n, a.data.shape).copy()),)

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# attention building blocks
# ---------------------------------------------------------------------------


def tanh_clip(logits, clip):
    """Squash logits into (-clip, clip) via clip*tanh(logits)."""
    if clip <= 0:
        raise ValueError(f"clip must be positive, got {clip}")
    return mul(tanh(logits), float(clip))


def masked_softmax(logits, mask=None, temperature=1.0):
    """Softmax over the last axis with infeasible entries forced to exact 0.

    ``mask`` is a boolean array broadcastable to ``logits`` (True = feasible).
    Stabilised by subtracting the per-row max over feasible entries.
    """
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    logits = as_tensor(logits)
    z = logits.data / temperature
    if mask is None:
        m = np.ones(z.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    feasible_any = m.any(axis=-1)
    if not feasible_any.all():
        row = tuple(int(i) for i in np.argwhere(~feasible_any)[0])
        raise AllMasked(row)

    neg = np.finfo(z.dtype).min
    zmax = np.max(np.where(m, z, neg), axis=-1, keepdims=True)
    e = np.where(m, np.exp(z - zmax), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    out = Tensor(p)

    def back(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        gz = p * (g - dot)
        return ((logits, gz / temperature),)

    return _record(out, (logits,), back)


def attention_core(q, k, v, num_heads, mask=None):
    """Scaled dot-product attention over pre-projected q/k/v, heads concatenated.

    q: [B, Lq, d], k/v: [B, Lk, d]; mask broadcastable to [B, Lq, Lk]
    (True = attend). No output projection; callers add their own.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    B, Lq, d = q.data.shape
    Bk, Lk, dk = k.data.shape
    if (B, d) != (Bk, dk) or v.data.shape != k.data.shape:
        raise ShapeMismatch(f"attention q{q.data.shape} k{k.data.shape} v{v.data.shape}")
    if d % num_heads != 0:
        raise HeadDivisibility(f"dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def split(x, L):
        return transpose(reshape(x, (B, L, num_heads, dh)), (0, 2, 1, 3))  # [B,H,L,dh]

    qh = split(q, Lq)
    kh = split(k, Lk)
    vh = split(v, Lk)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (B, Lq, Lk))[:, None, :, :]
    probs = masked_softmax(scores, mask)
    out = matmul(probs, vh)  # [B,H,Lq,dh]
    return reshape(transpose(out, (0, 2, 1, 3)), (B, Lq, d))
