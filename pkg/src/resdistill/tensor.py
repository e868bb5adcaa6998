"""Dense tensors with tape-free reverse-mode autodiff.

Every differentiable op builds its output with a closure that maps the
output gradient to one gradient per parent. :func:`backward` walks the graph
in reverse topological order and deposits gradients on leaf tensors that
require them, adding to whatever is already there.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

PROB_FLOOR = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (frozen-teacher forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """n-d real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- construction helpers -------------------------------------------

    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = cls.__new__(Tensor)
        Tensor.__init__(out, data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- elementwise arithmetic -----------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), bw)

    __rmul__ = __mul__

    def sum(self):
        shape = self.shape
        return Tensor._from_op(self.data.sum(), (self,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self):
        n = self.data.size
        shape = self.shape
        return Tensor._from_op(self.data.mean(), (self,), lambda g: (np.full(shape, g / n, dtype=self.dtype),))

    def reshape(self, *shape):
        old = self.shape
        return Tensor._from_op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on ``[C,H,W]`` or ``[B,C,H,W]`` input."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, c_in, h, w = x.shape
    c_out, wc_in, k, k2 = weight.shape
    if wc_in != c_in or k != k2:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise DomainError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise DomainError(f"kernel {k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DomainError("conv2d output would be empty")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(np.ascontiguousarray(xd), k, stride, ho, wo)
    cols2 = cols.reshape(b * ho * wo, c_in * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols2 @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, c_out)
        gx = gw = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, c_in, k, k)
            gx = kernels.col2im(dcols, hp, wp, stride)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
        if weight.requires_grad:
            gw = (g2.T @ cols2).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    result = Tensor._from_op(out, parents, bw)
    if squeeze:
        result = result.reshape(result.shape[1:])
    return result


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        if bias is None:
            return grads
        return grads + (g.sum(axis=0),)

    return Tensor._from_op(out, parents, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes of ``[B,C,H,W]``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (b, c, h, w)).astype(x.dtype),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), bw)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over channel groups (population variance)."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if num_groups < 1 or c % num_groups:
        raise ShapeError(f"{c} channels not divisible into {num_groups} groups")
    xg = x.data.reshape(b, num_groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(b, c, h, w)
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = (g * g4).reshape(b, num_groups, m)
            xh = xhat.reshape(b, num_groups, m)
            dx = inv / m * (m * dxhat - dxhat.sum(axis=2, keepdims=True)
                            - xh * (dxhat * xh).sum(axis=2, keepdims=True))
            dx = dx.reshape(b, c, h, w)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# probabilities and losses
# ---------------------------------------------------------------------------


def _check_temperature(t: float) -> None:
    if not t > 0:
        raise DomainError(f"temperature must be positive, got {t}")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_with_temperature(logits: Tensor, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    s = _softmax_np(logits.data / temperature)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / temperature,)

    return Tensor._from_op(s, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    ls = _log_softmax_np(logits.data)
    s = np.exp(ls)
    return Tensor._from_op(ls, (logits,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def _batch_size(arr: np.ndarray) -> int:
    return 1 if arr.ndim == 1 else int(np.prod(arr.shape[:-1]))


def kl_divergence(p, q) -> Tensor:
    """Batch-mean of ``sum p * ln(p / q)`` over the last axis.

    Both arguments must hold normalised rows. Probabilities are floored at
    ``PROB_FLOOR`` before the logarithm.
    """
    p = _as_tensor(p)
    q = _as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    for name, arr in (("p", p.data), ("q", q.data)):
        if np.any(arr < 0) or not np.allclose(arr.sum(axis=-1), 1.0, rtol=0, atol=1e-6):
            raise DomainError(f"{name} rows are not probability distributions")
    pc = np.maximum(p.data, PROB_FLOOR)
    qc = np.maximum(q.data, PROB_FLOOR)
    n = _batch_size(p.data)
    log_ratio = np.log(pc) - np.log(qc)
    value = (p.data * log_ratio).sum() / n

    def bw(g):
        gp = g * (log_ratio + (p.data > PROB_FLOOR)) / n
        gq = -g * p.data / qc * (q.data > PROB_FLOOR) / n
        return gp, gq

    return Tensor._from_op(np.asarray(value, dtype=p.dtype), (p, q), bw)


def soft_loss(teacher_logits, student_logits: Tensor, temperature: float) -> Tensor:
    """Temperature-softened KL(teacher || student) scaled by T squared.

    The teacher side is read as a constant; gradient reaches only the
    student logits.
    """
    _check_temperature(temperature)
    t = _data(teacher_logits)
    s = student_logits
    if t.shape != s.shape:
        raise ShapeError(f"logit shapes differ: {t.shape} vs {s.shape}")
    p = _softmax_np(t / temperature)
    log_p = _log_softmax_np(t / temperature)
    log_q = _log_softmax_np(s.data / temperature)
    n = _batch_size(t)
    t2 = temperature * temperature
    value = t2 * (p * (log_p - log_q)).sum() / n
    q = np.exp(log_q)

    def bw(g):
        return (g * temperature * (q - p) / n,)

    return Tensor._from_op(np.asarray(value, dtype=s.dtype), (s,), bw)


def mse_loss(a: Tensor, b) -> Tensor:
    """Mean of squared differences over every element."""
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = 2.0 * g * diff / n
        return d, -d

    return Tensor._from_op(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), bw)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape}, labels {labels.shape}")
    k = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"labels outside [0, {k})")
    ls = _log_softmax_np(logits.data)
    n = labels.shape[0]
    rows = np.arange(n)
    value = -ls[rows, labels].mean()

    def bw(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return (g * d / n,)

    return Tensor._from_op(np.asarray(value, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order[::-1]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in _topo_order(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff_check(fn: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Largest deviation between autodiff and central differences.

    ``fn`` maps a tensor shaped like ``x`` to a scalar tensor. The error is
    ``max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|)``, i.e. relative to
    the gradient's scale so near-zero entries do not dominate.
    """
    x0 = np.array(_data(x), dtype=np.float64)
    probe = Tensor(x0.copy(), requires_grad=True)
    backward(fn(probe))
    auto = probe.grad if probe.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(x0.copy())).data)
        flat[i] = orig - h
        fm = float(fn(Tensor(x0.copy())).data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)

    scale = max(np.abs(auto).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(auto - numeric).max() / scale)
