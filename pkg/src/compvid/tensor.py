"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values are plain :class:`numpy.ndarray` objects wrapped in :class:`Tensor`.
Operations are recorded on the active :class:`Tape` only when one is open
and at least one input requires a gradient, so inference code (sampling,
evaluation) never pays for graph bookkeeping.

Tape policy: :func:`backward` replays adjoints in exact reverse execution
order and then clears the tape.  Open a fresh ``with Tape():`` block per
training step.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32
_DEBUG = False
_state = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_debug(flag: bool) -> None:
    """Enable the NaN/Inf scan on every op output."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """An immutable array value that can carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape_id: int | None = None

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
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Tape:
    """Ordered record of executed operations.

    Each entry holds the output tensor, the input tensors and a closure that
    maps the output adjoint to input adjoints.  Use as a context manager;
    tapes do not nest.
    """

    _next_id = 0

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        Tape._next_id += 1
        self.id = Tape._next_id

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._saved = active_tape()
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._saved


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by tensor op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape_id = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._tape_id = tape.id
        tape.entries.append((out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Gradients add across fan-out and onto any existing ``.grad``.  The tape
    is cleared afterwards.
    """
    tape = tape if tape is not None else active_tape()
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None or loss._tape_id != tape.id:
        raise RuntimeError("loss was not produced by ops recorded on this tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.entries):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._tape_id is None:
                t.grad = gi.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                prev = adj.get(id(t))
                adj[id(t)] = gi if prev is None else prev + gi
    tape.clear()


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _result(xd * sig, (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- dense

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is [in, out]."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: input features {xd.shape[-1]} != weight rows {wd.shape[0]}")
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; negative ids yield all-zero rows (padding / null token)."""
    ids = np.asarray(ids, dtype=np.int64)
    valid = ids >= 0
    safe = np.where(valid, ids, 0)
    out = table.data[safe] * valid[..., None]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, safe[valid], g[valid])
        return (gt,)

    return _result(out, (table,), bw)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of [N,C,H,W] with [K,C,kh,kw]."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    k, cw, kh, kw = wd.shape
    if c != cw:
        raise ValueError(f"conv2d: input channels {c} != weight in-channels {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({k},)")
    for name, size, ks in (("height", h, kh), ("width", w, kw)):
        span = size + 2 * padding - ks
        if span < 0 or span % stride:
            raise ValueError(f"conv2d: {name} {size} with kernel {ks}, padding {padding}, "
                             f"stride {stride} does not divide exactly")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = wd.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (g2.T @ cols).reshape(wd.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gcols = np.ascontiguousarray((g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), inputs, bw)


def temporal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Kernel-3 convolution along frames with zero padding 1.

    ``x`` is [F,C,H,W] or [B,F,C,H,W]; weight is [K,C,3].  Every spatial
    position is processed independently.
    """
    xd, wd = x.data, weight.data
    squeeze = xd.ndim == 4
    if squeeze:
        xd = xd[None]
    if xd.ndim != 5:
        raise ValueError(f"temporal_conv1d expects [F,C,H,W] or [B,F,C,H,W], got {x.shape}")
    b, f, c, h, w = xd.shape
    if f == 0:
        raise ValueError("temporal_conv1d: zero frames")
    k, cw, kt = wd.shape
    if cw != c or kt != 3:
        raise ValueError(f"temporal_conv1d: weight {wd.shape} incompatible with {c} input channels")
    xl = np.ascontiguousarray(xd.transpose(0, 1, 3, 4, 2))  # B,F,H,W,C
    xp = np.zeros((b, f + 2, h, w, c), dtype=xd.dtype)
    xp[:, 1:1 + f] = xl
    # taps stacked on the last axis: one [B*F*H*W, 3C] @ [3C, K] product
    cols = np.concatenate([xp[:, j:j + f] for j in range(3)], axis=-1).reshape(-1, 3 * c)
    wcat = wd.transpose(2, 1, 0).reshape(3 * c, k)
    out = cols @ wcat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, f, h, w, k).transpose(0, 1, 4, 2, 3)
    if squeeze:
        out = out[0]

    def bw(g):
        gl = (g[None] if squeeze else g).transpose(0, 1, 3, 4, 2)
        g2 = np.ascontiguousarray(gl).reshape(-1, k)
        gw = (cols.T @ g2).reshape(3, c, k).transpose(2, 1, 0)
        gcols = (g2 @ wcat.T).reshape(b, f, h, w, 3, c)
        gx = gcols[:, :, :, :, 1].copy()
        gx[:, :-1] += gcols[:, 1:, :, :, 0]
        gx[:, 1:] += gcols[:, :-1, :, :, 2]
        gx = gx.transpose(0, 1, 4, 2, 3)
        if squeeze:
            gx = gx[0]
        gb = g2.sum(axis=0) if bias is not None else None
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), inputs, bw)


def avg_pool2x(x: Tensor) -> Tensor:
    xd = x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x: spatial dims {h}x{w} must be even")
    out = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result(out, (x,), bw)


def upsample2x(x: Tensor) -> Tensor:
    xd = x.data
    n, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- normalization

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    n, c = xd.shape[:2]
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(xd.shape)
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        red = (0,) + tuple(range(2, xd.ndim))
        gg = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m = xh.shape[2]
        gx = inv / m * (m * gxhat - gxhat.sum(axis=2, keepdims=True)
                        - xh * (gxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(xd.shape), gg, gbeta

    return _result(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- attention

def attention(q: Tensor, k: Tensor, v: Tensor, identity: bool = False) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    Shapes are [..., L, D], [..., M, D], [..., M, E].  With ``identity`` the
    attention matrix is forced to the identity (requires L == M), which turns
    the op into a pass-through of ``v``.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape[-1] <= 0:
        raise ValueError("attention: key dimension must be positive")
    if kd.shape[-2] == 0:
        raise ValueError("attention: no keys (M = 0)")
    if kd.shape[-2] != vd.shape[-2]:
        raise ValueError(f"attention: {kd.shape[-2]} keys but {vd.shape[-2]} values")
    if identity:
        if qd.shape[-2] != kd.shape[-2]:
            raise ValueError("attention: identity weights need L == M")
        return _result(vd.copy(), (q, k, v), lambda g: (None, None, g))
    scale = 1.0 / math.sqrt(qd.shape[-1])
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return _unbroadcast(gq, qd.shape), _unbroadcast(gk, kd.shape), _unbroadcast(gv, vd.shape)

    return _result(out, (q, k, v), bw)


# ---------------------------------------------------------------- embeddings

def sinusoidal_embed(t, dim: int, max_period: float = 10000.0, dtype=None) -> Tensor:
    """Sin/cos timestep features: first half sin, second half cos.

    ``t`` may be a scalar or a 1D array of timesteps; the result is [dim] or
    [len(t), dim].
    """
    if dim % 2:
        raise ValueError(f"sinusoidal_embed: dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    tt = np.asarray(t, dtype=np.float64)
    args = tt[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return Tensor(emb.astype(dtype or _DEFAULT_DTYPE))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference; ``b`` is treated as a constant target if it is an array."""
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------- gradient checking

def numerical_grad(fn: Callable[[], float], arr: np.ndarray, index, h: float) -> float:
    old = arr[index]
    arr[index] = old + h
    fp = fn()
    arr[index] = old - h
    fm = fn()
    arr[index] = old
    return (fp - fm) / (2 * h)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6,
              max_checks: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps Tensors to a Tensor; its output is reduced with a fixed
    random projection so every output element contributes.  The relative
    error is ``|a - n| / max(|a| + |n|, 1e-8 * scale)``.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a) for a in inputs]
    probe = None

    def scalar(*ts):
        nonlocal probe
        out = fn(*ts)
        if probe is None:
            probe = rng.standard_normal(out.shape).astype(out.dtype)
        return sum(mul(out, Tensor(probe)))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = scalar(*leaves)
        backward(loss, tape)
    worst = 0.0
    scale = max(float(np.max(np.abs(l.grad))) if l.grad is not None else 0.0 for l in leaves) or 1.0
    for arr, leaf in zip(arrays, leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        idx = list(np.ndindex(arr.shape))
        if max_checks is not None and len(idx) > max_checks:
            pick = rng.choice(len(idx), size=max_checks, replace=False)
            idx = [idx[i] for i in pick]
        for index in idx:
            num = numerical_grad(lambda: float(scalar(*[Tensor(a) for a in arrays]).data), arr, index, h)
            a = float(analytic[index])
            denom = max(abs(a) + abs(num), 1e-8 * scale)
            worst = max(worst, abs(a - num) / denom)
    return worst
