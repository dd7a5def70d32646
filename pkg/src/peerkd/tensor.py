"""Dense-tensor engine with reverse-mode differentiation.

Values are numpy arrays (float32 for training, float64 for gradient
checking). Every differentiable op links its output to its inputs with a
vector-Jacobian-product closure; ``backward`` replays the recorded graph in
reverse topological order. Gradients accumulate into ``Tensor.grad`` until
explicitly cleared, so multi-phase optimization controls exactly when they
reset.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ConfigError, ShapeError, StateError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional value, optionally participating in the gradient graph.

    ``data`` is row-major and immutable by convention once produced:
    optimizers replace the array rather than writing into it, so saved
    activations in recorded graphs stay consistent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, _prev=(), _vjp=None, _op=""):
        if (dtype is None and isinstance(data, (np.ndarray, np.floating))
                and data.dtype in (np.float32, np.float64)):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=dtype or np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = _prev
        self._vjp = _vjp
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, severed from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op!r})"

    # -- operator sugar (same-shape tensors or python scalars only) --

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def backward(self):
        backward(self)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data, parents, vjp, op):
    """Wrap an op result; record the vjp only when the graph is live."""
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    if tracked:
        return Tensor(data, requires_grad=True, _prev=tuple(parents), _vjp=vjp, _op=op)
    return Tensor(data, _op=op)


def topo_order(root: Tensor) -> list:
    """Recorded operations in topological order (inputs before outputs)."""
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
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires-grad tensor.

    Adjoints are tracked per call, so running backward twice from one loss
    doubles every gradient rather than compounding stale intermediates.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = topo_order(loss)
    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._prev, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    if b.data.shape not in ((), a.data.shape):
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def vjp(g):
        gb = g if b.data.shape else np.sum(g, dtype=g.dtype)
        return g, gb

    return _make(a.data + b.data, (a, b), vjp, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    if b.data.shape not in ((), a.data.shape):
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")

    def vjp(g):
        ga = g * b.data
        gb = g * a.data
        if not b.data.shape:
            gb = np.sum(gb, dtype=g.dtype)
        return ga, gb

    return _make(a.data * b.data, (a, b), vjp, "mul")


def power(a: Tensor, exponent) -> Tensor:
    e = float(exponent)
    out = a.data ** e

    def vjp(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(out, (a,), vjp, "pow")


def absolute(a: Tensor) -> Tensor:
    """|x| elementwise; subgradient 0 at exactly 0."""

    def vjp(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), vjp, "abs")


def sum_all(a: Tensor) -> Tensor:
    def vjp(g):
        return (np.full_like(a.data, g),)

    return _make(np.sum(a.data, dtype=a.data.dtype), (a,), vjp, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def vjp(g):
        return (np.full_like(a.data, g / n),)

    return _make(np.mean(a.data, dtype=a.data.dtype), (a,), vjp, "mean")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in [0, 1), got {slope}")
    mask = x.data >= 0
    out = np.where(mask, x.data, x.data * np.asarray(slope, dtype=x.data.dtype))

    def vjp(g):
        return (np.where(mask, g, g * np.asarray(slope, dtype=g.dtype)),)

    return _make(out, (x,), vjp, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, output clamped into the open interval (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    tiny = np.finfo(d.dtype).tiny
    top = np.nextafter(d.dtype.type(1.0), d.dtype.type(0.0))
    out = np.clip(out, tiny, top)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp, "sigmoid")


def pointwise_activation(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    """Dispatch by name: 'relu', 'leaky_relu' (uses slope), or 'sigmoid'."""
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# linear / conv / norm / pooling
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[B,F_in] @ weight[F_out,F_in]^T + bias[F_out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: input width {x.data.shape[1]} != weight fan-in {weight.data.shape[1]}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def vjp(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), vjp, "linear")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """Sliding windows of a padded NCHW array as [B, C*kh*kw, L] columns."""
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return windows.reshape(b, c * kh * kw, oh * ow), oh, ow


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with [C_out,C_in,kH,kW] kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    b, c_in, h, w = x.data.shape
    c_out, kc, kh, kw = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad stride {stride} or padding {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols).reshape(b, c_out, oh, ow)
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({c_out},)")
        out = out + bias.data[None, :, None, None]

    def vjp(g):
        go = g.reshape(b, c_out, oh * ow)
        g_kernel = np.einsum("bol,bkl->ok", go, cols).reshape(kernel.data.shape)
        g_cols = np.matmul(wmat.T, go).reshape(b, c_in, kh, kw, oh, ow)
        g_xp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                g_xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += g_cols[:, :, u, v]
        if padding:
            g_x = g_xp[:, :, padding:padding + h, padding:padding + w]
        else:
            g_x = g_xp
        g_bias = go.sum(axis=(0, 2)) if bias is not None else None
        return (g_x, g_kernel) if bias is None else (g_x, g_kernel, g_bias)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, vjp, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray | None, running_var: np.ndarray | None,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (B, H, W) of an NCHW tensor.

    Training mode normalizes by batch statistics and folds them into the
    running buffers in place (exponential moving average, unbiased variance
    for the running estimate). Eval mode normalizes by the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch_norm expects NCHW input")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batch_norm: gamma/beta must be per-channel vectors")
    axes = (0, 2, 3)
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise StateError("batch_norm: eval mode requires populated running stats")
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        g_beta = g.sum(axis=axes)
        g_gamma = (g * xhat).sum(axis=axes)
        scale = (gamma.data * inv_std)[None, :, None, None]
        if training:
            g_mean = g.mean(axis=axes)[None, :, None, None]
            gx_mean = (g * xhat).mean(axis=axes)[None, :, None, None]
            g_x = scale * (g - g_mean - xhat * gx_mean)
        else:
            g_x = scale * g
        return g_x, g_gamma, g_beta

    return _make(out, (x, gamma, beta), vjp, "batch_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [B,C,H,W] -> [B,C]."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW input")
    b, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(g.dtype),)

    return _make(out, (x,), vjp, "global_avg_pool")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2d expects NCHW input")
    b, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        g_x = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g_x.astype(g.dtype),)

    return _make(out, (x,), vjp, "avg_pool2d")


# ---------------------------------------------------------------------------
# row-wise classification helpers
# ---------------------------------------------------------------------------


def row_log_softmax(z: Tensor, temperature: float = 1.0) -> Tensor:
    """log softmax(z/T) per row of a [B,C] tensor, max-subtracted for stability."""
    if z.data.ndim != 2:
        raise ShapeError("row_log_softmax expects a [B,C] tensor")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    t = np.asarray(temperature, dtype=z.data.dtype)
    u = z.data / t
    u = u - u.max(axis=1, keepdims=True)
    logp = u - np.log(np.exp(u).sum(axis=1, keepdims=True))

    def vjp(g):
        p = np.exp(logp)
        return ((g - p * g.sum(axis=1, keepdims=True)) / t,)

    return _make(logp, (z,), vjp, "row_log_softmax")


def row_softmax(z: Tensor, temperature: float = 1.0) -> Tensor:
    """softmax(z/T) per row of a [B,C] tensor."""
    logp = row_log_softmax(z, temperature)
    p = np.exp(logp.data)

    def vjp(g):
        return (g * p,)

    return _make(p, (logp,), vjp, "exp")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make(out, (x,), vjp, "reshape")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """x[i, index[i]] for each row i of a [B,C] tensor."""
    if x.data.ndim != 2:
        raise ShapeError("take_rows expects a [B,C] tensor")
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx]

    def vjp(g):
        g_x = np.zeros_like(x.data)
        g_x[rows, idx] = g
        return (g_x,)

    return _make(out, (x,), vjp, "take_rows")
