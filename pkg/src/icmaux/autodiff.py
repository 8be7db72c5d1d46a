"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Each forward op returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the recorded graph in reverse topological order.  Leaf tensors accumulate
gradients in ``.grad``; intermediate gradients live only for the duration of
one backward call, so several backward passes may share one graph.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
GROUPS = ("encoder", "entropy_model", "decoder", "aux_branch", "recognizer")

_grad_enabled = True
_check_finite = True
# replay buffer used by grad_check to hold detached values at the base point
_detach_replay: list | None = None
_detach_record: list | None = None


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""

    def __init__(self, op: str, shape: tuple):
        super().__init__(f"non-finite values produced by {op} (shape {shape})")
        self.op = op
        self.shape = shape


class DomainError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by exp(-log) instead")
        return scale(self, 1.0 / other)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor tagged with a hierarchical name and a group."""

    __slots__ = ("name", "group")

    def __init__(self, data, name: str = "", group: str = "encoder"):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.name = name
        self.group = group

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, group={self.group}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(op, data.shape)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable (trailing-dimension rule)") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > lo
    return _make(np.where(mask, x.data, x.dtype.type(lo)), (x,), lambda g: (g * mask,), "clamp_min")


def ste_round(x) -> Tensor:
    """Round half-to-even in the forward pass, identity gradient backward."""
    x = as_tensor(x)
    return _make(np.round(x.data), (x,), lambda g: (g,), "ste_round")


def detach(x) -> Tensor:
    x = as_tensor(x)
    if _detach_replay is not None:
        return Tensor(_detach_replay.pop(0))
    out = Tensor(x.data.copy())
    if _detach_record is not None:
        _detach_record.append(out.data.copy())
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NCHW tensor."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


# ---------------------------------------------------------------------------
# reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    if x.data.size == 0:
        raise DomainError("sum of empty tensor")
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise DomainError("mean of empty tensor")
    shape = x.shape
    count = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def sum_log2(x) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise DomainError("sum_log2 of empty tensor")
    if np.any(x.data <= 0):
        raise DomainError("sum_log2 of non-positive input")
    xd = x.data
    inv_ln2 = 1.0 / math.log(2.0)
    return _make(np.asarray(np.log2(xd).sum()), (x,), lambda g: (g * inv_ln2 / xd,), "sum_log2")


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    ``logits`` has the class axis at position 1: ``[N, C, ...]``; ``labels``
    is ``[N, ...]``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    n_classes = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    lab = np.expand_dims(labels, 1)
    picked = np.take_along_axis(logp, lab, axis=1)
    count = labels.size
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def bw(g):
        grad = ez / se
        np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=1) - 1.0, axis=1)
        return (grad * (g / count),)

    return _make(loss, (logits,), bw, "softmax_cross_entropy")


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and 0/1 ``targets``."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"target shape {t.shape} does not match logits {logits.shape}")
    l = logits.data
    per = np.maximum(l, 0) - l * t + np.log1p(np.exp(-np.abs(l)))
    count = l.size
    return _make(np.asarray(per.sum() / count, dtype=l.dtype), (logits,),
                 lambda g: ((_sigmoid(l) - t) * (g / count),), "bce_with_logits")


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return _make(np.asarray((diff * diff).sum() / n, dtype=diff.dtype), (a, b), bw, "mse")


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out ``[N, C*kh*kw, Ho*Wo]`` (NCHW-friendly, batched matmul ready)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into a padded image."""
    n, c = shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input axis 1 has {c}, kernel axis 1 has {cw}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad} (axes 2, 3)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = _pad(x.data, pad)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(k, -1)
    out = np.matmul(wm, cols)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (k,):
            raise ShapeError(f"bias shape {b.shape} != ({k},)")
        out = out + b.data[:, None]
        parents.append(b)
    out = out.reshape(n, k, ho, wo)
    padded_shape = xp.shape

    def bw(g):
        g3 = g.reshape(n, k, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dxp = _col2im(np.matmul(wm.T, g3), padded_shape, kh, kw, stride, ho, wo)
            gx = dxp[:, :, pad:pad + h, pad:pad + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g3.sum(axis=(0, 2)) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is laid out ``[C_in, C_out, kh, kw]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cw, k, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv_transpose2d channel mismatch: input axis 1 has {c}, kernel axis 0 has {cw}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"padding {pad} leaves empty output (axes 2, 3)")
    x3 = x.data.reshape(n, c, h * wd)
    wm = w.data.reshape(c, -1)
    outp = _col2im(np.matmul(wm.T, x3), (n, k, hf, wf), kh, kw, stride, h, wd)
    out = outp[:, :, pad:pad + ho, pad:pad + wo]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (k,):
            raise ShapeError(f"bias shape {b.shape} != ({k},)")
        out = out + b.data.reshape(1, k, 1, 1)
        parents.append(b)
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = _pad(g, pad) if pad else g
        dcols = _im2col(gp, kh, kw, stride, h, wd)  # [N, K*kh*kw, H*W]
        gx = np.matmul(wm, dcols).reshape(n, c, h, wd) if x.requires_grad else None
        gw = np.matmul(x3, dcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, bw, "conv_transpose2d")


# ---------------------------------------------------------------------------
# backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that participate in the graph, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def ancestor_parameters(t: Tensor) -> list[Parameter]:
    """Trainable parameters that ``t`` depends on through the recorded graph."""
    return [n for n in topological_order(t) if isinstance(n, Parameter)] if t.requires_grad else []


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3, tol: float = 1e-3,
               respect_detach: bool = True, name: str = "", numeric_dtype=None) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    The error is normwise: ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    With ``respect_detach`` every ``detach`` inside ``f`` returns its value at the
    base point during the perturbed evaluations, so the numeric derivative only
    sees the live path.  ``numeric_dtype`` evaluates the difference quotient at
    another precision, e.g. float64 for checking a float32 backward pass
    without drowning it in float32 roundoff of ``f``.
    """
    global _detach_record, _detach_replay
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    xt = Tensor(base.copy(), requires_grad=True)
    _detach_record = [] if respect_detach else None
    try:
        out = f(xt)
        recorded = _detach_record
    finally:
        _detach_record = None
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    probe_base = base.astype(numeric_dtype) if numeric_dtype is not None else base
    numeric = np.zeros(base.shape, dtype=probe_base.dtype)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = probe_base.copy()
                probe.reshape(-1)[i] += sign * eps
                _detach_replay = list(recorded) if respect_detach else None
                try:
                    vals.append(float(f(Tensor(probe)).data))
                finally:
                    _detach_replay = None
            flat[i] = (vals[0] - vals[1]) / (2 * eps)
    scale_ = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-30)
    err = float(np.abs(analytic - numeric).max(initial=0.0)) / scale_
    return GradCheckReport(name, err, tol, analytic, numeric)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
