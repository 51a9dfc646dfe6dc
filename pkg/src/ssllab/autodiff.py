"""Dense tensors with reverse-mode differentiation.

Define-by-run: every operation that touches a grad-requiring tensor records
a tape node (parents + backward closure) on its output. ``backward(loss)``
replays the recorded nodes once, in reverse topological order, and
accumulates gradients into every ``requires_grad`` leaf. The tape is
rebuilt on each forward pass and consumed by ``backward``.

Parameters and activations are float32 by default; tests that compare
against finite differences build float64 graphs instead (pass
``dtype=np.float64`` to :func:`tensor`).
"""

from __future__ import annotations

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32

_PROB_FLOOR = 1e-12
_TARGET_TOL = 1e-6


class AutodiffError(Exception):
    """Base error for the tensor core."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible."""


class ValidationError(AutodiffError):
    """Input values violate an operation's precondition."""


class UsageError(AutodiffError):
    """The autodiff API was used out of contract (e.g. double backward)."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense n-d array plus its place on the gradient tape.

    ``data`` is always a numpy float array. ``grad`` is filled by
    :func:`backward` for tensors with ``requires_grad``. Non-leaf tensors
    additionally carry their parents and a backward closure; both are
    dropped once the tape is consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A grad-less leaf view of the same values."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are promoted to constants
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self.dtype), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    """Build a leaf tensor from array-like data; rejects NaN/Inf values."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor data must be finite (NaN/Inf rejected)")
    return Tensor(arr, requires_grad=requires_grad)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data)


def _accumulate(t: Tensor, g):
    # grads are only ever rebound, never mutated in place, so views are safe
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _scalar(value, dtype):
    return np.asarray(value, dtype=dtype).reshape(())


def backward(loss: Tensor) -> None:
    """Run the tape backward from a scalar loss, filling leaf gradients.

    Consumes the tape: a second call on the same graph raises UsageError.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward already called on this graph; re-run the forward pass")
    if not (loss.requires_grad or loss._parents):
        raise UsageError("loss is not connected to any requires_grad tensor")

    # iterative depth-first topological sort over recorded parents
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            if node._consumed:
                raise UsageError("tape node already consumed; re-run the forward pass")
            node._backward_fn(node.grad)
            node._backward_fn = None
            node._parents = ()
        node._consumed = True


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _coerce(b, a.dtype)
    out = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(out, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    out = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (B,I)x(I,O), got {a.shape} x {b.shape}")
    out = a.data @ b.data

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(out, (a, b), back)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x[B,I] @ w[I,O] + b[O]."""
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"bias shape {b.shape} does not match output width {w.shape}")
    return add(matmul(x, w), b)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def back(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _result(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.data.dtype.type(0))

    def back(g):
        _accumulate(x, g * (x.data > 0))  # sub-gradient at exactly 0 is 0

    return _result(out, (x,), back)


def tsum(x: Tensor) -> Tensor:
    out = _scalar(x.data.sum(), x.dtype)

    def back(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True))

    return _result(out, (x,), back)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _scalar(x.data.sum() / n, x.dtype)

    def back(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=True))

    return _result(out, (x,), back)


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[B,C,H,W] with kernels[F,C,kh,kw]."""
    out = _kernels.conv2d_forward(x.data, kernels.data, stride, padding)
    x_shape, k_shape = x.data.shape, kernels.data.shape

    def back(g):
        if x.requires_grad or x._parents:
            _accumulate(x, _kernels.conv2d_backward_input(g, kernels.data, x_shape, stride, padding))
        if kernels.requires_grad or kernels._parents:
            _accumulate(kernels, _kernels.conv2d_backward_weights(g, x.data, k_shape, stride, padding))

    return _result(out, (x, kernels), back)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill
    a window are dropped."""
    b, c, h, w = x.data.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} smaller than pool window {size}")
    trimmed = x.data[:, :, : ho * size, : wo * size]
    out = trimmed.reshape(b, c, ho, size, wo, size).mean(axis=(3, 5), dtype=x.dtype)

    def back(g):
        gx = np.zeros_like(x.data)
        tile = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        gx[:, :, : ho * size, : wo * size] = tile
        _accumulate(x, gx)

    return _result(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [B,C,H,W] -> [B,C]."""
    b, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), dtype=x.dtype)

    def back(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(x.dtype, copy=True))

    return _result(out, (x,), back)


# ---------------------------------------------------------------------------
# probability ops and divergences


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of logits[B,C], max-subtracted for stability."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax expects [B,C] logits, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        _accumulate(logits, s * (g - inner))

    return _result(s, (logits,), back)


def _check_target_rows(target):
    sums = target.sum(axis=1)
    if not np.all(np.abs(sums - 1.0) <= _TARGET_TOL):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValidationError(f"target row {bad} sums to {sums[bad]:.8f}, expected 1")


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def cross_entropy(pred: Tensor, target, from_logits: bool = True, row_weights=None) -> Tensor:
    """Mean cross-entropy H(target, pred) over the batch.

    ``pred`` holds logits by default; pass ``from_logits=False`` for
    probability rows. ``target`` rows must be distributions (one-hot
    allowed) and receive no gradient. ``row_weights`` scales each row's
    contribution while keeping the full-batch denominator, which is how the
    confidence-masked losses zero out low-confidence rows.
    """
    t = _as_array(target).astype(pred.dtype)
    if t.shape != pred.data.shape:
        raise ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}")
    _check_target_rows(t)
    bsz = pred.data.shape[0]
    w = None if row_weights is None else np.asarray(row_weights, dtype=pred.dtype).reshape(bsz, 1)

    if from_logits:
        z = pred.data - pred.data.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = -(t * logp)
        s = np.exp(logp)

        def back(g):
            gl = (s - t) / bsz
            if w is not None:
                gl = gl * w
            _accumulate(pred, (g * gl).astype(pred.dtype, copy=False))

    else:
        p = np.maximum(pred.data, _PROB_FLOOR)
        rows = -(t * np.log(p))

        def back(g):
            gp = np.where(pred.data > _PROB_FLOOR, -t / p, 0.0) / bsz
            if w is not None:
                gp = gp * w
            _accumulate(pred, (g * gp).astype(pred.dtype, copy=False))

    if w is not None:
        rows = rows * w
    out = _scalar(rows.sum() / bsz, pred.dtype)
    return _result(out, (pred,), back)


def l2_prob_distance(p: Tensor, q: Tensor, row_weights=None) -> Tensor:
    """(1 / (C*B)) * sum of squared row differences between p[B,C] and q[B,C]."""
    if p.data.shape != q.data.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {q.shape}")
    b, c = p.data.shape
    w = None if row_weights is None else np.asarray(row_weights, dtype=p.dtype).reshape(b, 1)
    d = p.data - q.data
    sq = d * d if w is None else w * d * d
    out = _scalar(sq.sum() / (b * c), p.dtype)

    def back(g):
        gd = (2.0 / (b * c)) * d
        if w is not None:
            gd = gd * w
        _accumulate(p, (g * gd).astype(p.dtype, copy=False))
        _accumulate(q, (-g * gd).astype(q.dtype, copy=False))

    return _result(out, (p, q), back)


def kl_divergence(p: Tensor, q: Tensor, row_weights=None) -> Tensor:
    """Mean over the batch of KL(p_row || q_row); q is floored at 1e-12.

    Gradients flow to both sides; in every use here the p side is a
    detached target. The p-side gradient uses the same floor inside the
    log, which matters only at p == 0 where the exact derivative diverges.
    """
    if p.data.shape != q.data.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {q.shape}")
    bsz = p.data.shape[0]
    w = None if row_weights is None else np.asarray(row_weights, dtype=p.dtype).reshape(bsz, 1)
    pf = np.maximum(p.data, _PROB_FLOOR)
    qf = np.maximum(q.data, _PROB_FLOOR)
    terms = np.where(p.data > 0, p.data * (np.log(pf) - np.log(qf)), 0.0)
    if w is not None:
        terms = terms * w
    out = _scalar(terms.sum() / bsz, p.dtype)

    def back(g):
        if p.requires_grad or p._parents:
            gp = (np.log(pf) - np.log(qf) + 1.0) / bsz
            if w is not None:
                gp = gp * w
            _accumulate(p, (g * gp).astype(p.dtype, copy=False))
        if q.requires_grad or q._parents:
            gq = np.where(q.data > _PROB_FLOOR, -pf / qf, 0.0) / bsz
            if w is not None:
                gq = gq * w
            _accumulate(q, (g * gq).astype(q.dtype, copy=False))

    return _result(out, (p, q), back)
