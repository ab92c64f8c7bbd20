"""Minimal reverse-mode automatic differentiation over dense float32 arrays.

Only the operators the networks and losses need are provided. The graph is
built define-by-run: every op on tracked tensors records a closure that maps
the output gradient to input gradients, and :meth:`Tensor.backward` walks the
graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_grad_enabled = True


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


class GradError(RuntimeError):
    """Raised when backward is called on something that cannot be differentiated."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype (float64 for finite-difference checks)."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        t.name = self.name
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Gradients add to whatever is already stored; call ``zero_grad`` on the
        parameters between steps.
        """
        if not self.requires_grad:
            raise GradError("backward() called on a tensor that is not tracked")
        if grad is None:
            if self.data.size != 1:
                raise GradError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root: Tensor) -> list[Tensor]:
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
    order.reverse()
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data.astype(DTYPE, copy=False)
    out.grad = None
    out.name = None
    out._op = op
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape).astype(DTYPE)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _make(a.data * DTYPE(k), (a,), lambda g: (g * DTYPE(k),), "scale")


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def minimum(a: Tensor, bound: float) -> Tensor:
    """Clamp from above; the gradient is zero where the bound is active."""
    mask = a.data < bound
    return _make(np.where(mask, a.data, DTYPE(bound)), (a,), lambda g: (g * mask,), "minimum")


def maximum(a: Tensor, bound: float) -> Tensor:
    mask = a.data > bound
    return _make(np.where(mask, a.data, DTYPE(bound)), (a,), lambda g: (g * mask,), "maximum")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without forming sigmoid(x) first."""
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * (1 - _sigmoid_np(x)),), "log_sigmoid")


def log1mexp(a: Tensor) -> Tensor:
    """log(1 - exp(x)) for x < 0, switching formulas at -ln 2 for accuracy."""
    x = a.data.astype(np.float64)
    if (x >= 0).any():
        raise NumericError("log1mexp needs strictly negative input")
    out = np.where(x > -np.log(2), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))
    # d/dx log(1-e^x) = -e^x / (1-e^x) = -1 / expm1(-x)
    dx = -1.0 / np.expm1(-x)
    return _make(out, (a,), lambda g: ((g * dx).astype(DTYPE),), "log1mexp")


def power_abs(a: Tensor, rho: float) -> Tensor:
    """|x| ** rho, elementwise."""
    rho = float(rho)
    if rho == 1.0:
        return abs_(a)
    x = a.data
    out = np.abs(x) ** rho

    def back(g):
        return (g * rho * np.sign(x) * np.abs(x) ** (rho - 1),)

    return _make(out, (a,), back, "power_abs")


def glu(linear_path: Tensor, gate_path: Tensor) -> Tensor:
    """Gated linear unit: ``linear_path * sigmoid(gate_path)``."""
    if linear_path.shape != gate_path.shape:
        raise DimensionError(f"glu paths differ: {linear_path.shape} vs {gate_path.shape}")
    s = _sigmoid_np(gate_path.data)
    lin = linear_path.data
    out = lin * s
    return _make(out, (linear_path, gate_path),
                 lambda g: (g * s, g * lin * s * (1 - s)), "glu")


# --------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, dtype=np.float64)
    keep = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def back(g):
        return (np.broadcast_to(g.reshape(keep), a.shape).astype(DTYPE),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axes), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    src = a.shape

    def back(g):
        full = np.zeros(src, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), back, "narrow")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tensors, back, "concat")


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax across axis 1 (classes) at every remaining position."""
    x = a.data.astype(np.float64)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        g = g.astype(np.float64)
        return ((out * (g - (g * out).sum(axis=1, keepdims=True))).astype(DTYPE),)

    return _make(out, (a,), back, "softmax")


def log_softmax_channels(a: Tensor) -> Tensor:
    x = a.data.astype(np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def back(g):
        g = g.astype(np.float64)
        return ((g - p * g.sum(axis=1, keepdims=True)).astype(DTYPE),)

    return _make(out, (a,), back, "log_softmax")


def lp_loss(a: Tensor, b: Tensor, rho: float = 1.0) -> Tensor:
    """Sum of ``|a - b| ** rho`` over each sample, averaged over the batch (axis 0)."""
    if a.shape != b.shape:
        raise DimensionError(f"lp_loss shapes differ: {a.shape} vs {b.shape}")
    if rho < 1:
        raise ValueError("rho must be >= 1")
    batch = a.shape[0] if a.ndim else 1
    return scale(sum_(power_abs(sub(a, b), rho)), 1.0 / batch)


# --------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return (int(v[0]), int(v[1]))


def _im2col(xp: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """Padded [B,C,Hp,Wp] -> [B*Ho*Wo, C*kh*kw]."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    b, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """Adjoint of :func:`_im2col`; ``cols`` is [B, Ho, Wo, C, kh, kw]."""
    out = np.zeros(padded_shape, dtype=DTYPE)
    blocks = np.ascontiguousarray(cols.transpose(4, 5, 0, 3, 1, 2))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += blocks[i, j]
    return out


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation with zero padding.

    x: [B, Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout].
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(b, ho, wo, cin, kh, kw)
            gxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, ho, wo)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0, dtype=np.float64).astype(DTYPE)

    return _make(np.ascontiguousarray(out), parents, back, "conv2d")


def conv2d_transposed(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
                      output_padding=0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input, plus bias.

    x: [B, Cin, H, W], weight: [Cin, Cout, kh, kw] (the weight of the conv being
    transposed). Output height is ``(H-1)*s - 2p + k + output_padding``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d_transposed expects 4-d input and weight")
    b, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"conv2d_transposed channel mismatch: input {cin}, weight {wcin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if not (0 <= oph < sh or oph == 0) or not (0 <= opw < sw or opw == 0):
        raise DimensionError("output_padding must be smaller than the stride")
    ho = (h - 1) * sh - 2 * ph + kh + oph
    wo = (w - 1) * sw - 2 * pw + kw + opw
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d_transposed output would be empty")
    padded = (b, cout, ho + 2 * ph, wo + 2 * pw)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = weight.data.reshape(cin, -1)
    dcols = (xm @ wmat).reshape(b, h, w, cout, kh, kw)
    full = _col2im(dcols, padded, kh, kw, sh, sw, h, w)
    out = full[:, :, ph : ph + ho, pw : pw + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
        cols = _im2col(gp, kh, kw, sh, sw, h, w)
        gx = (cols @ wmat.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)

    return _make(np.ascontiguousarray(out), parents, back, "conv2d_transposed")


# --------------------------------------------------------------------------
# normalization


class DegenerateBatchError(ValueError):
    pass


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (biased variance); in eval mode the running buffers are
    used and treated as constants.
    """
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    c = x.shape[1]
    g4 = gamma.data.reshape(1, c, 1, 1)
    if not training:
        inv = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(DTYPE).reshape(1, c, 1, 1)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1).astype(DTYPE)) * inv
        out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

        def back_eval(g):
            return (g * g4 * inv,
                    (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE),
                    g.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE))

        return _make(out, (x, gamma, beta), back_eval, "batch_norm")

    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise DegenerateBatchError("batch_norm in training mode needs B*H*W >= 2")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    running_mean *= 1 - momentum
    running_mean += momentum * mu
    running_var *= 1 - momentum
    running_var += momentum * var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)).astype(DTYPE)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def back(g):
        gd = g.astype(np.float64)
        dgamma = (gd * xhat).sum(axis=(0, 2, 3))
        dbeta = gd.sum(axis=(0, 2, 3))
        dxhat = gd * gamma.data.reshape(1, c, 1, 1)
        dx = (inv.reshape(1, c, 1, 1) / n) * (
            n * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return dx.astype(DTYPE), dgamma.astype(DTYPE), dbeta.astype(DTYPE)

    return _make(out, (x, gamma, beta), back, "batch_norm")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; returns the same state."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError("optimizer state does not match parameter list")
    state.step_count += 1
    t = state.step_count
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p)
        if m.shape != p.shape or g.shape != p.shape:
            raise DimensionError("optimizer buffers do not match parameter shape")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + epsilon)
        p -= step.astype(p.dtype)
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a list of tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.epsilon)


# --------------------------------------------------------------------------
# gradient checking


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
                    seed: int = 0, max_entries: int | None = 64, dtype=np.float64) -> float:
    """Compare backward() with central finite differences.

    ``fn`` maps tensors to a tensor; it is contracted with a fixed random
    projection to get a scalar. Returns the worst norm-wise relative error
    ``|g_a - g_fd| / max(|g_a|, |g_fd|)`` over the inputs. When ``max_entries``
    is set, a random subset of coordinates per input is perturbed. The check
    runs with storage ``dtype`` (float64 by default, so differencing noise stays
    well below the tolerance).
    """
    with precision(dtype):
        return _check_gradients(fn, inputs, eps, seed, max_entries)


def _check_gradients(fn, inputs, eps, seed, max_entries) -> float:
    # separate stream so the projection never coincides with caller inputs
    rng = np.random.default_rng([seed, 0x9E37])
    arrays = [np.asarray(a, dtype=DTYPE).copy() for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape).astype(np.float64)

    def scalar(arrs) -> float:
        with no_grad():
            out = fn(*[Tensor(a) for a in arrs])
        return float(np.sum(out.data.astype(np.float64) * proj))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward(proj.astype(DTYPE))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])
            up = scalar(arrays)
            flat[i] = orig - eps
            lo = float(flat[i])
            down = scalar(arrays)
            flat[i] = orig
            numeric[j] = (up - down) / (hi - lo)
        a = analytic.reshape(-1)[idx].astype(np.float64)
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst
