"""Reverse-mode differentiation over numpy arrays.

Each primitive records a node (inputs, output, backward closure) stamped
with a global sequence number. ``backward`` collects the nodes reachable
from the loss and replays them in exactly the reverse of recording order,
so tensors outside the loss's graph are never touched.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import weakref
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them (inference, numeric checks)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "name", "inputs", "_out", "backward_fn")

    def __init__(self, name, inputs, out, backward_fn):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        # weak, so output -> node -> output is not a cycle and frees promptly
        self._out = weakref.ref(out)
        self.backward_fn = backward_fn

    @property
    def out(self):
        return self._out()


class Tensor:
    """n-d array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(name, data, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(name, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor in the loss's graph.

    Gradients are reset at the start of the sweep, never accumulated across
    calls.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = {}
    tensors = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in tensors:
            continue
        tensors[id(t)] = t
        node = t._node
        if node is not None and id(node) not in nodes:
            nodes[id(node)] = node
            stack.extend(node.inputs)
    for t in tensors.values():
        if t.requires_grad:
            t.grad = None

    grads = {id(loss): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda n: n.seq, reverse=True):
        out = node.out
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for inp, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig
    for t in tensors.values():
        if not t.requires_grad or t.grad is not None:
            continue
        g = grads.get(id(t))
        t.grad = g if g is not None else np.zeros_like(t.data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and reductions -------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), bw)


def tensor_sum(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(x.data.sum()), (x,), bw)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _make("mean", np.asarray(x.data.mean()), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", x.data.reshape(shape), (x,), bw)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)
    # keep the open interval even where the exact value rounds to 0 or 1
    fi = np.finfo(z.dtype)
    p = np.clip(p, fi.tiny, 1 - fi.epsneg)

    def bw(g):
        return (g * p * (1 - p),)

    return _make("sigmoid", p, (x,), bw)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- layers ------------------------------------------------------------------

def _out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {cw}")
    if int(stride) != stride or stride < 1:
        raise ValueError(f"conv2d stride must be a positive integer, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    if kh < 1 or kw < 1 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({f},)")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(f, -1)
    out = (w2 @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = w2.T @ g2
            if pointwise:
                gx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                gp = kernels.col2im(dcols, n, c, h + 2 * padding, w + 2 * padding, kh, kw, stride, ho, wo)
                gx = gp[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", out, inputs, bw)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization. In training mode ``running_mean`` and
    ``running_var`` are updated in place (unbiased variance, EMA)."""
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    n, c, h, w = x.shape
    m = n * h * w
    if m < 1:
        raise ValueError("batchnorm needs at least one element per channel")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gsum = g.sum(axis=axes)
        gxhat_sum = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std).reshape(1, c, 1, 1)
            if training:
                gx = scale / m * (
                    m * g - gsum.reshape(1, c, 1, 1) - xhat * gxhat_sum.reshape(1, c, 1, 1)
                )
            else:
                gx = g * scale
        return gx, gxhat_sum, gsum

    return _make("batchnorm2d", out, (x, gamma, beta), bw)


def pool2d(x: Tensor, kind: str, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max or average pooling. Average windows divide by k*k, padding included."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError(f"pool2d needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ValueError(f"pool window {k} exceeds padded input {hp}x{wp}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    fill = -np.inf if kind == "max" else 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)

    if kind == "max":
        out, idx = kernels.maxpool_forward(xp, k, stride, ho, wo)

        def bw(g):
            gp = kernels.maxpool_backward(np.ascontiguousarray(g), idx, hp, wp)
            return (np.ascontiguousarray(gp[:, :, padding:padding + h, padding:padding + w]),)

        return _make("maxpool2d", out, (x,), bw)

    planes = xp.reshape(n * c, 1, hp, wp)
    cols = kernels.im2col(planes, k, k, stride, ho, wo)
    out = (cols.sum(axis=0) / (k * k)).astype(x.dtype).reshape(n, c, ho, wo)

    def bw(g):
        dcols = np.broadcast_to(g.reshape(1, -1) / (k * k), cols.shape).astype(x.dtype)
        gp = kernels.col2im(np.ascontiguousarray(dcols), n * c, 1, hp, wp, k, k, stride, ho, wo)
        return (np.ascontiguousarray(gp.reshape(n, c, hp, wp)[:, :, padding:padding + h, padding:padding + w]),)

    return _make("avgpool2d", out, (x,), bw)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = tuple(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels shape mismatch: {t.shape} vs {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _make("concat", out, inputs, bw)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"affine dimension mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"affine bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data

    def bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _make("affine", out, (x, weight, bias), bw)


# -- losses --------------------------------------------------------------------

PROB_CLAMP = 1e-7


def bce(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; ``y`` holds one label per sample and is
    broadcast over every remaining axis of ``p``."""
    y = np.asarray(y, dtype=p.dtype)
    if y.ndim == 0:
        y = np.full(p.shape[:1] if p.ndim else (), y, dtype=p.dtype)
    yb = np.broadcast_to(y.reshape(y.shape + (1,) * (p.ndim - y.ndim)), p.shape)
    pc = np.clip(p.data, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1 - PROB_CLAMP)
    terms = yb * np.log(pc) + (1 - yb) * np.log1p(-pc)
    count = p.size

    def bw(g):
        return (g * -(yb / pc - (1 - yb) / (1 - pc)) * inside / count,)

    return _make("bce", np.asarray(-terms.mean(), dtype=p.dtype), (p,), bw)


# -- verification ------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central differences in float64.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. ``max_coords`` limits the number of checked
    coordinates per input (sampled with ``seed``).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = None

    def scalar(out_data):
        return float((out_data * probe).sum()) if probe is not None else float(out_data.sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    if out.size != 1:
        probe = rng.standard_normal(out.shape)
        loss = tensor_sum(mul(out, Tensor(probe)))
    else:
        loss = tensor_sum(out)
    backward(loss)

    worst = 0.0
    checked = 0
    for i, a in enumerate(arrays):
        analytic = ts[i].grad.reshape(-1)
        coords = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            coords = rng.choice(a.size, size=max_coords, replace=False)
        for flat in coords:
            plus = [b.copy() for b in arrays]
            minus = [b.copy() for b in arrays]
            plus[i].reshape(-1)[flat] += step
            minus[i].reshape(-1)[flat] -= step
            denom = plus[i].reshape(-1)[flat] - minus[i].reshape(-1)[flat]
            with no_grad():
                fp = scalar(fn(*[Tensor(b) for b in plus]).data)
                fm = scalar(fn(*[Tensor(b) for b in minus]).data)
            numeric = (fp - fm) / denom
            worst = max(worst, float(rel_err(analytic[flat], numeric)))
            checked += 1
    return GradCheckReport(worst, tolerance, checked)
