"""Dense float64 tensors with reverse-mode differentiation and an Adam optimizer.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Tensors are numbered
at creation, so sorting a graph by creation id is a valid topological order and
:func:`backward` simply walks that order in reverse.

Arrays may carry leading batch dimensions; elementwise binary operations
broadcast like numpy and reduce gradients back to each operand's shape.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "ZeroNormError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "tanh",
    "elementwise",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "layer_norm",
    "softmax_rows",
    "softmax",
    "l2_normalize",
    "cosine_similarity",
    "l1_loss",
    "cross_entropy",
    "aam_softmax_loss",
    "multihead_attention",
    "backward",
    "grad_check",
    "lr_schedule",
    "Adam",
    "SGD",
]

_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


class ShapeError(ValueError):
    pass


class ZeroNormError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

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
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    # a sum is non-finite iff some element is (values here are far from overflow)
    if not np.isfinite(np.sum(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=grad_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    if b.ndim == 2 and a.ndim > 2:
        # fold batch axes into rows: one gemm instead of a loop of small ones
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def grad_fn2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), grad_fn2, "matmul")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0  # relu'(0) = 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), grad_fn, "gelu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "gelu": gelu, "tanh": tanh}


def elementwise(op: str, *inputs, factor: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, gelu, tanh.

    Binary ops require equal shapes here; use the named functions directly
    for broadcasting.
    """
    if op == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        (x,) = inputs
        return scale(x, factor)
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if len(inputs) == 2:
        a, b = (_as_tensor(t) for t in inputs)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: operand shapes differ {a.shape} vs {b.shape}")
    return fn(*inputs)


# ---------------------------------------------------------------- shape / reduction


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


# ---------------------------------------------------------------- normalisation


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), grad_fn, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _make(y, (x,), grad_fn, "softmax")


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of an [m, n] matrix."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects [m, n] with n >= 1, got {x.shape}")
    return softmax(x, axis=-1)


def l2_normalize(x) -> Tensor:
    """Project vectors along the last axis onto the unit sphere."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise ZeroNormError("cannot normalise a zero-norm vector")
    y = x.data / norm

    def grad_fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), grad_fn, "l2_normalize")


def cosine_similarity(u, v) -> Tensor:
    """Cosine along the last axis; batch axes are kept."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity shapes differ: {u.shape} vs {v.shape}")
    out = tsum(mul(l2_normalize(u), l2_normalize(v)), axis=-1)
    return out


# ---------------------------------------------------------------- losses


def l1_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        s = np.sign(diff) * (g / n)  # sign(0) = 0 at ties
        return s, -s

    return _make(np.abs(diff).mean(), (pred, target), grad_fn, "l1_loss")


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of [B, n] logits against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    if labels.shape[0] != z.shape[0]:
        raise ShapeError("one label per logit row is required")
    b, n = z.shape
    if labels.min() < 0 or labels.max() >= n:
        raise IndexError(f"label out of range [0, {n})")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    loss = (np.log(se[:, 0]) + zmax[:, 0] - z[np.arange(b), labels]).mean()

    def grad_fn(g):
        p = e / se
        p[np.arange(b), labels] -= 1.0
        return ((g / b) * p).reshape(logits.shape),

    return _make(np.asarray(loss), (logits,), grad_fn, "cross_entropy")


def _margin_cos(c, labels: np.ndarray, m: float) -> Tensor:
    # cos(theta + m) on the true-class column only
    c = _as_tensor(c)
    cm, sm = math.cos(m), math.sin(m)
    rows = np.arange(c.shape[0])
    ct = np.clip(c.data[rows, labels], -1.0, 1.0)
    st = np.sqrt(np.maximum(1.0 - ct * ct, 1e-12))
    out = c.data.copy()
    out[rows, labels] = ct * cm - st * sm

    def grad_fn(g):
        gc = g.copy()
        gc[rows, labels] = g[rows, labels] * (cm + ct * sm / st)
        return (gc,)

    return _make(out, (c,), grad_fn, "margin_cos")


def aam_softmax_loss(embedding, class_weights, label, m: float = 0.2, s: float = 30.0) -> Tensor:
    """Additive angular margin softmax loss, averaged over the batch.

    ``embedding`` is [D] or [B, D]; ``label`` an int or [B] ints.
    """
    emb = _as_tensor(embedding)
    w = _as_tensor(class_weights)
    if not (0.0 <= m < math.pi / 2):
        raise ValueError(f"margin must lie in [0, pi/2), got {m}")
    if s <= 0:
        raise ValueError("scale must be positive")
    if emb.ndim == 1:
        emb = reshape(emb, (1, emb.shape[0]))
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n_spk = w.shape[0]
    if labels.min() < 0 or labels.max() >= n_spk:
        raise IndexError(f"label out of range [0, {n_spk})")
    cos = matmul(l2_normalize(emb), transpose(l2_normalize(w)))
    logits = scale(_margin_cos(cos, labels, m), s)
    return cross_entropy(logits, labels)


# ---------------------------------------------------------------- attention


def multihead_attention(q, k, v, heads: int, params: dict) -> Tensor:
    """Scaled dot-product attention over [..., T, d] inputs.

    ``params`` holds ``wq, wk, wv, wo`` ([d, d]) and optional biases
    ``bq, bk, bv, bo`` ([d]).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ShapeError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def proj(x, w, b):
        y = matmul(x, params[w])
        return add(y, params[b]) if b in params else y

    def split(x):
        lead = x.shape[:-1]
        return transpose(reshape(x, lead + (heads, dh)), tuple(range(len(lead) - 1)) + (len(lead), len(lead) - 1, len(lead) + 1))

    qh = split(proj(q, "wq", "bq"))
    kh = split(proj(k, "wk", "bk"))
    vh = split(proj(v, "wv", "bv"))
    nlead = qh.ndim - 2
    kt = transpose(kh, tuple(range(nlead)) + (nlead + 1, nlead))
    att = softmax(matmul(scale(qh, 1.0 / math.sqrt(dh)), kt), axis=-1)
    ctx = matmul(att, vh)  # [..., heads, T, dh]
    lead = ctx.shape[:-3]
    nl = len(lead)
    ctx = transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    ctx = reshape(ctx, lead + (ctx.shape[-3], d))
    return proj(ctx, "wo", "bo")


# ---------------------------------------------------------------- backward


def _graph(seed: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [seed]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        stack.extend(t._parents)
    return [seen[i] for i in sorted(seen)]


def backward(seed: Tensor) -> None:
    """Fill ``grad`` on every tensor reachable from the scalar ``seed``.

    Gradients are reset first, so calling twice gives the same result.
    """
    if seed.data.size != 1:
        raise ShapeError(f"backward needs a scalar seed, got shape {seed.shape}")
    nodes = _graph(seed)
    for t in nodes:
        t.grad = None
    seed.grad = np.ones_like(seed.data)
    for t in reversed(nodes):
        if t._backward is None or t.grad is None:
            continue
        pgrads = t._backward(t.grad)
        for p, g in zip(t._parents, pgrads):
            if not p.requires_grad or g is None:
                continue
            p.grad = g if p.grad is None else p.grad + g
    for t in nodes:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)


def grad_check(function: Callable[[Tensor], Tensor], point, h: float = 1e-4,
               richardson: bool = False, coords=None) -> float:
    """Max coordinate-wise relative error of the analytic gradient vs central differences.

    Relative error uses the denominator max(|a|, |n|, 1e-8).  With
    ``richardson`` the numeric derivative combines central differences at ``h``
    and ``h / 2`` to cancel the O(h^2) truncation term; useful for deep,
    strongly curved functions, at the cost of slightly more roundoff.
    ``coords`` restricts the check to those flat indices (default: all).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = function(x)
    backward(out)
    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64).reshape(-1)
    analytic = x.grad.reshape(-1)[idx]
    numeric = np.empty_like(analytic)

    def central(i: int, step: float) -> float:
        orig = flat[i]
        flat[i] = orig + step
        fp = function(Tensor(x0)).item()
        flat[i] = orig - step
        fm = function(Tensor(x0)).item()
        flat[i] = orig
        return (fp - fm) / (2.0 * step)

    with no_grad():
        for j, i in enumerate(idx):
            if richardson:
                numeric[j] = (4.0 * central(i, h / 2) - central(i, h)) / 3.0
            else:
                numeric[j] = central(i, h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------- optimisers


def lr_schedule(step: int, peak: float, warmup_frac: float, total: int) -> float:
    """Linear warmup to ``peak`` over ``warmup_frac * total`` steps, then linear decay to 0."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    warm = warmup_frac * total
    if math.isclose(warm, round(warm), rel_tol=0.0, abs_tol=1e-9):
        warm = float(round(warm))
    if warm > 0 and step <= warm:
        return peak * step / warm
    if total <= warm:
        return peak
    return peak * max(total - step, 0) / (total - warm)


class Adam:
    """Adam with bias correction and the warmup/linear-decay schedule.

    With ``total_steps=None`` the learning rate is constant.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 warmup_frac: float = 0.07, total_steps: int | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup_frac = warmup_frac
        self.total_steps = total_steps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def current_lr(self, step: int) -> float:
        if self.total_steps is None:
            return self.lr
        return lr_schedule(step, self.lr, self.warmup_frac, self.total_steps)

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for i, g in enumerate(grads):
            if g.shape != self.params[i].shape:
                raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {self.params[i].shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {i} at step {self.t + 1}")
        self.t += 1
        lr = self.current_lr(self.t)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads=None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for i, g in enumerate(grads):
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {i}")
        self.t += 1
        for p, g in zip(self.params, grads):
            p.data -= self.lr * g
