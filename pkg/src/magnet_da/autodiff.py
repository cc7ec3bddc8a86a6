"""Float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to input gradients.
:func:`backward` orders the graph topologically (the :class:`Tape`) and runs the
closures in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass(eq=False)
class Parameter:
    """A named trainable tensor."""

    name: str
    tensor: Tensor
    lr_multiplier: float = 1.0

    def __post_init__(self):
        if self.lr_multiplier <= 0:
            raise ValueError(f"lr_multiplier must be positive, got {self.lr_multiplier}")
        self.tensor.requires_grad = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


@dataclass
class Tape:
    """Topologically ordered record of the operations that produced a tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


def zero_grads(tensors: Iterable[Tensor | Parameter]) -> None:
    for t in tensors:
        (t.tensor if isinstance(t, Parameter) else t).grad = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), fn, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), fn, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    keep = ad >= floor
    return _make(np.maximum(ad, floor), (a,), lambda g: (g * keep,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def mask(a: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask; no gradient flows into the mask."""
    k = np.asarray(keep, dtype=np.float64)
    return _make(a.data * k, (a,), lambda g: (g * k,), "mask")


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    basic = isinstance(idx, slice) or (isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx))

    def fn(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), fn, "getitem")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate N×Cᵢ×H×W tensors along the channel axis, in argument order."""
    if not inputs:
        raise DimensionError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"cannot concatenate {ref} with {t.shape}: N, H, W must agree")
    bounds = np.cumsum([t.shape[1] for t in inputs])[:-1]
    return _make(
        np.concatenate([t.data for t in inputs], axis=1),
        tuple(inputs),
        lambda g: tuple(np.split(g, bounds, axis=1)),
        "concat",
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weightᵀ + bias, with weight stored out×in."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def logsumexp(a: Tensor) -> Tensor:
    """Row-wise log Σ exp over the last axis of a matrix, max-shifted."""
    ad = a.data
    m = ad.max(axis=1, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _make(out, (a,), lambda g: (g[:, None] * soft,), "logsumexp")


def softmax(a: Tensor) -> Tensor:
    ad = a.data
    e = np.exp(ad - ad.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (a,), fn, "softmax")


def sq_distances(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between the rows of x (n×d) and y (m×d)."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"feature dimension mismatch: {x.shape} vs {y.shape}")
    xd, yd = x.data, y.data
    # a private copy of yᵀ keeps x·xᵀ on the same BLAS path as x·yᵀ, so equal
    # inputs give bitwise-equal distance matrices
    yt = np.array(yd.T, order="C")
    out = (xd * xd).sum(1)[:, None] + (yd * yd).sum(1)[None, :] - 2.0 * (xd @ yt)

    def fn(g):
        gx = 2.0 * (g.sum(1)[:, None] * xd - g @ yd)
        gy = 2.0 * (g.sum(0)[:, None] * yd - g.T @ xd)
        return gx, gy

    return _make(out, (x, y), fn, "sqdist")


# ---------------------------------------------------------------- convolution & pooling


def _check4(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise DimensionError(f"{what} expects N×C×H×W, got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) of an N×C×H×W input with F×C×kh×kw weights."""
    _check4(x, "conv2d")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be F×C×kh×kw, got {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {weight.shape} larger than padded input {x.shape}")
    wd = weight.data

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        xr = x.data.reshape(n, c, h * w)
        wm = wd.reshape(f, c)
        out = np.matmul(wm, xr).reshape(n, f, h, w)

        def fn1(g):
            gr = g.reshape(n, f, h * w)
            gx = np.matmul(wm.T, gr).reshape(n, c, h, w)
            gw = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, 1, 1)
            return gx, gw

        return _make(out, (x, weight), fn1, "conv2d")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    hp, wp = h + 2 * padding, w + 2 * padding
    if padding:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    if stride > 1:
        return _conv2d_strided(x, weight, xp, stride, padding, ho, wo)

    # Stride 1: one GEMM of the stacked kernel taps against the padded input,
    # then shifted sums of the (narrow) per-tap responses. Cheaper than im2col
    # whenever F < C, which holds for every 3×3 conv in a dense layer.
    taps = kh * kw
    xr = xp.reshape(n, c, hp * wp)
    ws = wd.transpose(2, 3, 0, 1).reshape(taps * f, c)
    y = np.matmul(ws, xr).reshape(n, taps, f, hp, wp)
    out = y[:, 0, :, :ho, :wo].copy()
    for t in range(1, taps):
        i, j = divmod(t, kw)
        out += y[:, t, :, i : i + ho, j : j + wo]

    def fn(g):
        emb = np.zeros((n, taps, f, hp, wp))
        for t in range(taps):
            i, j = divmod(t, kw)
            emb[:, t, :, i : i + ho, j : j + wo] = g
        emb = emb.reshape(n, taps * f, hp * wp)
        gw = np.matmul(emb, xr.transpose(0, 2, 1)).sum(axis=0)
        gw = gw.reshape(kh, kw, f, c).transpose(2, 3, 0, 1)
        gxp = np.matmul(ws.T, emb).reshape(n, c, hp, wp)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw

    return _make(out, (x, weight), fn, "conv2d")


def _conv2d_strided(x: Tensor, weight: Tensor, xp: np.ndarray, stride: int, padding: int, ho: int, wo: int) -> Tensor:
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    wd = weight.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: N × (C·kh·kw) × (Ho·Wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    wm = wd.reshape(f, c * kh * kw)
    out = np.matmul(wm, cols).reshape(n, f, ho, wo)

    def fn(g):
        gr = g.reshape(n, f, ho * wo)
        gw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gcols = np.matmul(wm.T, gr).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + w]
        return gxp, gw

    return _make(out, (x, weight), fn, "conv2d")


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    _check4(x, "avg_pool2d")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"pool window {k} exceeds spatial extent {h}×{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    if stride == k and h % k == 0 and w % k == 0:
        out = x.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

        def fn_tiled(g):
            gx = np.broadcast_to((g / (k * k))[:, :, :, None, :, None], (n, c, ho, k, wo, k))
            return (gx.reshape(n, c, h, w),)

        return _make(out, (x,), fn_tiled, "avg_pool2d")

    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(4, 5))

    def fn(g):
        gx = np.zeros((n, c, h, w))
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        return (gx,)

    return _make(out, (x,), fn, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """N×C×H×W → N×C spatial mean."""
    _check4(x, "global_avg_pool")
    return tmean(x, axis=(2, 3))


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> BatchNormState:
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
) -> Tensor:
    """Per-channel batch normalization of an N×C×H×W tensor.

    Train mode normalizes with biased batch statistics and moves the running
    estimates as ``running = 0.9·running + 0.1·batch`` (variance unbiased).
    """
    _check4(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + BN_EPS)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        inv4 = inv.reshape(1, c, 1, 1)

        def fn_eval(g):
            return g * g4 * inv4, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _make(xhat * g4 + b4, (x, gamma, beta), fn_eval, "batchnorm")
    if mode != "train":
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    m = n * h * w
    if m < 2:
        raise ContractError("batchnorm2d in train mode needs N·H·W >= 2 (degenerate batch)")
    # reductions run over a contiguous trailing axis; strided 4-D reductions are slow
    x3 = x.data.reshape(n, c, h * w)
    mean = x3.sum(axis=2).sum(axis=0) / m
    xc = x3 - mean[None, :, None]
    var = np.einsum("ncp,ncp->c", xc, xc) / m
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv[None, :, None]
    out = xhat * gamma.data[None, :, None]
    out += beta.data[None, :, None]
    state.running_mean = BN_MOMENTUM * state.running_mean + (1 - BN_MOMENTUM) * mean
    state.running_var = BN_MOMENTUM * state.running_var + (1 - BN_MOMENTUM) * var * m / (m - 1)

    def fn(g):
        g3 = g.reshape(n, c, h * w)
        gb = g3.sum(axis=2).sum(axis=0)
        gg = np.einsum("ncp,ncp->c", g3, xhat)
        gx = g3 - (gb / m)[None, :, None]
        gx -= xhat * (gg / m)[None, :, None]
        gx *= (gamma.data * inv)[None, :, None]
        return gx.reshape(n, c, h, w), gg, gb

    return _make(out.reshape(n, c, h, w), (x, gamma, beta), fn, "batchnorm")


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor | Parameter],
    step: float = 1e-5,
    tol: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
    names: Sequence[str] | None = None,
    floor: float | str = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    Tensors with more than ``max(32, max_coords)`` entries are checked on a
    random sample of that many coordinates. Relative error uses the denominator
    max(|analytic|, |numeric|, floor). ``floor="auto"`` sets it to the smallest
    gradient a central difference can resolve to ``tol`` (a few ulps of f over
    2·step, divided by ``tol``), for objectives with exactly-zero gradients.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tensors = [p.tensor if isinstance(p, Parameter) else p for p in params]
    if names is None:
        names = [p.name if isinstance(p, Parameter) else f"param{i}" for i, p in enumerate(params)]
    rng = np.random.default_rng(seed)
    zero_grads(tensors)
    value = f()
    backward(value)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    zero_grads(tensors)
    noise = 4.0 * np.finfo(np.float64).eps * max(1.0, abs(value.item())) / (2.0 * step)
    if floor == "auto":
        floor = max(1e-8, noise / tol)

    report: dict[str, float] = {}
    for name, t, ga in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        budget = max(32, max_coords)
        if flat.size <= budget:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=budget, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report[name] = worst
    return GradCheckReport(report, tol)
