"""Dense float64 tensors with reverse-mode autodiff on a whole-tensor tape.

The operation set is exactly what the network needs: matmul (2-D, plus
equal-leading-dimension stacked operands), pointwise {add, sub, mul, scale,
relu}, layer_norm, shape plumbing {transpose, reshape, concat, slice, mean,
flatten}, embedding-table gather, and leading-axis tiling. No broadcasting
beyond scalar-with-tensor.

Recording is scoped: operations append to the innermost active `Tape`
(see `Tape.__enter__`); with no active tape, everything runs as plain numpy
and costs nothing extra. `Tape.backward(loss)` walks the recorded nodes in
reverse exactly once, accumulating into `.grad` of every tensor that
requires it. Gradients of intermediates are freed as soon as their producer
has consumed them, which keeps peak memory near the forward footprint.
"""

import numpy as np

__all__ = [
    "Tensor", "Tape", "matmul", "add", "sub", "mul", "scale", "relu",
    "elementwise", "layer_norm", "transpose", "reshape", "concat",
    "slice_axis", "mean", "flatten", "reshape_ops", "gather_rows",
    "tile_leading", "record_op", "finite_diff_grad", "zero_grad",
]

_TAPES = []  # stack of active tapes; innermost last


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A dense float64 array plus its differentiation bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_needs")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._needs = self.requires_grad

    @classmethod
    def _wrap(cls, arr):
        """Adopt an existing float64 array without copying."""
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._needs = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Records operations in execution (hence topological) order."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss, free=False):
        """Accumulate d(loss)/d(leaf) into every requiring leaf's .grad.

        loss must be a scalar produced under this tape. Each recorded node
        is visited exactly once, in reverse order; repeated calls without a
        grad reset accumulate. With free=True the tape releases activation
        references as it goes (lower peak memory), after which a second
        backward needs a fresh forward recording.
        """
        if not self._nodes:
            raise RuntimeError("backward on an empty tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError("backward expects a scalar Tensor loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            needs = tuple(isinstance(t, Tensor) and t._needs
                          for t in node.inputs)
            grads = node.fn(g, needs)
            for t, need, gi in zip(node.inputs, needs, grads):
                if not need or gi is None:
                    continue
                if t.grad is None:
                    t.grad = np.array(gi)  # own the buffer
                else:
                    t.grad += gi
            if not node.out.requires_grad:
                node.out.grad = None
            if free:
                node.inputs = ()
                node.out = None
                node.fn = None
        if free:
            self._nodes.clear()


def record_op(out_data, inputs, fn):
    """Wrap a forward result and register its backward rule.

    fn(upstream, needs) must return one gradient array (or None) per input,
    aligned with `inputs`. Recording only happens under an active tape and
    only when some input requires gradients.
    """
    out = Tensor._wrap(np.asarray(out_data, dtype=np.float64))
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t._needs
                                for t in inputs):
        out._needs = True
        tape._nodes.append(_Node(out, tuple(inputs), fn))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _is_scalar_operand(x):
    return np.isscalar(x) or (isinstance(x, Tensor) and x.data.size == 1
                              and x.data.ndim == 0)


# ---------------------------------------------------------------------------
# core operations


def matmul(a, b):
    """Matrix product. 2-D operands, or stacked operands whose leading
    dimensions match exactly (computed per stack slice; not broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ValueError(f"matmul needs 2-D or stacked operands, "
                         f"got {da.shape} @ {db.shape}")
    if da.ndim != db.ndim or da.shape[:-2] != db.shape[:-2] \
            or da.shape[-1] != db.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {da.shape} @ {db.shape}")
    out = da @ db

    def backward(g, needs):
        ga = g @ db.swapaxes(-1, -2) if needs[0] else None
        gb = da.swapaxes(-1, -2) @ g if needs[1] else None
        return ga, gb

    return record_op(out, (a, b), backward)


def _pointwise_shapes_ok(a, b):
    return a.data.shape == b.data.shape or _is_scalar_operand(a) \
        or _is_scalar_operand(b)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _pointwise_shapes_ok(a, b):
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g, needs):
        ga = _reduce_to(g, a.data.shape) if needs[0] else None
        gb = _reduce_to(g, b.data.shape) if needs[1] else None
        return ga, gb

    return record_op(out, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _pointwise_shapes_ok(a, b):
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = a.data - b.data

    def backward(g, needs):
        ga = _reduce_to(g, a.data.shape) if needs[0] else None
        gb = _reduce_to(-g, b.data.shape) if needs[1] else None
        return ga, gb

    return record_op(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _pointwise_shapes_ok(a, b):
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    da, db = a.data, b.data
    out = da * db

    def backward(g, needs):
        ga = _reduce_to(g * db, da.shape) if needs[0] else None
        gb = _reduce_to(g * da, db.shape) if needs[1] else None
        return ga, gb

    return record_op(out, (a, b), backward)


def scale(a, c):
    """Multiply by a plain python/numpy scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    out = a.data * c

    def backward(g, needs):
        return (g * c if needs[0] else None,)

    return record_op(out, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    da = a.data
    out = np.maximum(da, 0.0)

    def backward(g, needs):
        # subgradient 0 at the kink
        return (g * (da > 0) if needs[0] else None,)

    return record_op(out, (a,), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale,
                "relu": relu}


def elementwise(op, a, b=None):
    """Dispatch form of the pointwise family."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a) if op == "relu" else fn(a, b)


def _reduce_to(g, shape):
    """Sum a gradient down to a scalar operand's shape when needed."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize the last axis, then affine: gain * xhat + bias.

    Fused op: the backward recomputes xhat from the cached per-row mean and
    inverse std instead of holding a second activation-sized buffer.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gain.shape}/{bias.shape} "
                         f"do not match last axis {d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.einsum("...i,...i->...", xc, xc) / d
    inv = 1.0 / np.sqrt(var + eps)[..., None]
    out = xc * inv
    out *= gain.data
    out += bias.data

    def backward(g, needs):
        xhat = xc * inv
        lead = tuple(range(g.ndim - 1))
        g2 = g.reshape(-1, d)
        ggain = np.einsum("ri,ri->i", g2, xhat.reshape(-1, d)) \
            if needs[1] else None
        gbias = g.sum(axis=lead) if needs[2] else None
        gx = None
        if needs[0]:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = np.einsum("...i,...i->...", gh, xhat)[..., None] / d
            xhat *= m2
            gx = gh
            gx -= m1
            gx -= xhat
            gx *= inv
        return gx, ggain, gbias

    return record_op(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g, needs):
        return (np.ascontiguousarray(g.transpose(inv)) if needs[0] else None,)

    return record_op(out, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    src = a.data.shape
    out = a.data.reshape(shape)

    def backward(g, needs):
        return (g.reshape(src) if needs[0] else None,)

    return record_op(out, (a,), backward)


def flatten(a):
    """Collapse all axes after the first (a 1-D input stays 1-D)."""
    a = _as_tensor(a)
    if a.data.ndim <= 1:
        return reshape(a, (-1,))
    return reshape(a, (a.data.shape[0], -1))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, needs):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return record_op(out, tuple(tensors), backward)


def slice_axis(a, axis, start, stop):
    a = _as_tensor(a)
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice [{start}:{stop}] out of range for axis "
                         f"of length {n}")
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = np.ascontiguousarray(a.data[key])
    src_shape = a.data.shape

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        full = np.zeros(src_shape)
        full[key] = g
        return (full,)

    return record_op(out, (a,), backward)


def mean(a):
    """Mean of every element, as a scalar tensor."""
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())
    shape = a.data.shape

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        return (np.full(shape, float(g) / n),)

    return record_op(out, (a,), backward)


_RESHAPE_OPS = {"transpose": transpose, "reshape": reshape, "concat": concat,
                "slice": slice_axis, "mean": mean, "flatten": flatten}


def reshape_ops(op, *args, **kwargs):
    """Dispatch form of the shape-plumbing family."""
    try:
        fn = _RESHAPE_OPS[op]
    except KeyError:
        raise ValueError(f"unknown reshape op {op!r}") from None
    return fn(*args, **kwargs)


def gather_rows(table, indices):
    """Select rows of a 2-D table by integer index (embedding lookup)."""
    table = _as_tensor(table)
    if table.data.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = table.data[idx]
    shape = table.data.shape

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return record_op(out, (table,), backward)


def tile_leading(a, n):
    """Stack n copies along a new leading axis; backward sums them."""
    a = _as_tensor(a)
    out = np.ascontiguousarray(np.broadcast_to(a.data, (n,) + a.data.shape))

    def backward(g, needs):
        return (g.sum(axis=0) if needs[0] else None,)

    return record_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# oracles and helpers


def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar-valued f at x.

    x may be a Tensor or a plain array; its buffer is perturbed in place
    coordinate by coordinate and restored, and f(x) is called with x itself,
    so f may freely build tensors internally.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = x.data if isinstance(x, Tensor) else np.asarray(x)
    grad = np.empty(base.shape)
    for idx in np.ndindex(base.shape):
        keep = base[idx]
        base[idx] = keep + h
        up = float(f(x))
        base[idx] = keep - h
        down = float(f(x))
        base[idx] = keep
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def zero_grad(params):
    for p in params:
        p.grad = None
