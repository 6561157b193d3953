"""Differentiable kernels.

Every op takes explicit shapes; there is no implicit broadcasting. Images are
NCHW. Each op returns a new Tensor and records a backward closure when any
operand requires a gradient.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, record


def _mismatch(kind: str, a, b) -> ShapeError:
    return ShapeError(f"{kind}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise _mismatch(kind, a.shape, b.shape)


def _dtype(*ts: Tensor):
    return np.result_type(*[t.data for t in ts])


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c_arr = np.asarray(c, dtype=a.dtype)
    return record("mul_scalar", (a,), a.data * c_arr, lambda g: (g * c_arr,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return record("add_scalar", (a,), a.data + np.asarray(c, dtype=a.dtype), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum propagates NaN, so a diverged input is not silently zeroed
    return record("relu", (x,), np.maximum(x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)
    out = x.data * sig

    def bw(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return record("silu", (x,), out, bw)


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return record("clamp", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


# ------------------------------------------------------------- shape / layout


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.numel():
        raise _mismatch("reshape", x.shape, shape)
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def concat(tensors, axis: int, kind: str = "concat") -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise _mismatch(kind, ref, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return record(kind, tensors, out, bw)


def concat_channels(*tensors: Tensor) -> Tensor:
    for t in tensors:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels: expected NCHW, got {t.shape}")
    return concat(tensors, axis=1, kind="concat_channels")


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Batch slice x[start:stop]."""
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"take_rows: [{start}:{stop}] out of range for {x.shape}")
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record("take_rows", (x,), x.data[start:stop], bw)


def add_channelwise(x: Tensor, b: Tensor) -> Tensor:
    """x (N,C,H,W) plus a per-sample, per-channel offset b (N,C)."""
    if x.ndim != 4 or b.shape != x.shape[:2]:
        raise _mismatch("add_channelwise", x.shape, b.shape)
    out = x.data + b.data[:, :, None, None]
    return record("add_channelwise", (x, b), out, lambda g: (g, g.sum(axis=(2, 3))))


# ----------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    src, dt = x.shape, x.dtype
    return record("sum", (x,), np.asarray(x.data.sum(), dtype=dt), lambda g: (np.full(src, g, dtype=dt),))


def mean(x: Tensor) -> Tensor:
    n = x.numel()
    src, dt = x.shape, x.dtype
    return record(
        "mean", (x,), np.asarray(x.data.mean(), dtype=dt), lambda g: (np.full(src, g / n, dtype=dt),)
    )


def global_avgpool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),)

    return record("global_avgpool", (x,), x.data.mean(axis=(2, 3)), bw)


def global_maxpool(x: Tensor) -> Tensor:
    """Per-channel spatial max; the gradient goes to the first maximal pixel."""
    if x.ndim != 4:
        raise ShapeError(f"global_maxpool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return record("global_maxpool", (x,), out, bw)


# ------------------------------------------------------------------- spatial


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"avgpool2d: spatial dims of {x.shape} not divisible by {k}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        g = g / (k * k)
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3),)

    return record("avgpool2d", (x,), out, bw)


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return record("upsample_nearest", (x,), out, bw)


def _shifted_cols(xl: np.ndarray, k: int) -> np.ndarray:
    """im2col on a padded channel-last image flattened to rows.

    Row r of the result gathers the k*k window whose top-left corner is flat
    position r. Rows whose window wraps past a row or sample edge hold junk;
    callers only read (or only send gradient to) valid corners.
    """
    n, hp, wp, c = xl.shape
    flat = xl.reshape(-1, c)
    m = flat.shape[0]
    cols = np.zeros((m, k * k, c), dtype=xl.dtype)
    for i in range(k):
        for j in range(k):
            s = i * wp + j
            cols[: m - s, i * k + j, :] = flat[s:]
    return cols.reshape(m, k * k * c)


def _pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xl = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xl[:, pad : pad + h, pad : pad + w, :] = x.transpose(0, 2, 3, 1)
    return xl


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Stride-1 cross-correlation. Default padding keeps the spatial size."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _mismatch("conv2d", x.shape, w.shape)
    o, c, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {w.shape}")
    if b is not None and b.shape != (o,):
        raise _mismatch("conv2d", w.shape, b.shape)
    pad = k // 2 if padding is None else int(padding)
    if not 0 <= pad <= k - 1:
        raise ShapeError(f"conv2d: padding {pad} outside [0, {k - 1}]")
    n, _, h, wdt = x.shape
    hp, wp = h + 2 * pad, wdt + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise _mismatch("conv2d", x.shape, w.shape)
    dt = _dtype(x, w)
    xl = _pad_nhwc(x.data.astype(dt, copy=False), pad)
    cols = _shifted_cols(xl, k)
    w2 = np.ascontiguousarray(w.data.astype(dt, copy=False).transpose(2, 3, 1, 0).reshape(k * k * c, o))
    out_flat = cols @ w2
    out = np.ascontiguousarray(out_flat.reshape(n, hp, wp, o)[:, :ho, :wo, :].transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data.astype(dt)[None, :, None, None]
    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g):
        gl = np.zeros((n, hp, wp, o), dtype=g.dtype)
        gl[:, :ho, :wo, :] = g.transpose(0, 2, 3, 1)
        gflat = gl.reshape(-1, o)
        gx = gw = None
        if need_w:
            gw = (cols.T @ gflat).reshape(k, k, c, o).transpose(3, 2, 0, 1)
            gw = np.ascontiguousarray(gw)
        if need_x:
            dcols = (gflat @ w2.T).reshape(-1, k * k, c)
            m = dcols.shape[0]
            dflat = np.zeros((m, c), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    s = i * wp + j
                    dflat[s:] += dcols[: m - s, i * k + j, :]
            gx = dflat.reshape(n, hp, wp, c)[:, pad : pad + h, pad : pad + wdt, :].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv2d", inputs, out, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N,F) @ w.T with w (O,F)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _mismatch("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise _mismatch("linear", w.shape, b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd
        gw = g.T @ xd
        return (gx, gw, g.sum(axis=0)) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("linear", inputs, out, bw)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups, then per-channel affine.

    groups == C gives instance normalization.
    """
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise _mismatch("group_norm", x.shape, gamma.shape)
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (
            dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True)
        )
        return gx.reshape(x.shape), ggamma, gbeta

    return record("group_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), bw)


# --------------------------------------------------------------------- losses


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute error. Subgradient at ties is 0."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("l1", a, b)
    diff = a.data - b.data
    n = diff.size
    s = np.sign(diff)

    def bw(g):
        ga = s * (g / n)
        return ga, -ga

    return record("l1", (a, b), np.asarray(np.abs(diff).mean(), dtype=diff.dtype), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return record("mse", (a, b), np.asarray((diff * diff).mean(), dtype=diff.dtype), bw)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    p = np.exp(_log_softmax(x.data))

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), p, bw)


def log_softmax(x: Tensor) -> Tensor:
    logp = _log_softmax(x.data)
    p = np.exp(logp)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", (x,), logp, bw)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels.

    reduction="none" returns the per-sample vector.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _mismatch("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    n = logits.shape[0]
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    per = -logp[rows, labels]
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0

    if reduction == "none":
        return record("cross_entropy", (logits,), per, lambda g: ((p - onehot) * g[:, None],))
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return record(
        "cross_entropy",
        (logits,),
        np.asarray(per.mean(), dtype=logits.dtype),
        lambda g: ((p - onehot) * (g / n),),
    )


# ------------------------------------------------------------------ dispatch

KINDS = {
    "conv2d": conv2d,
    "linear": linear,
    "relu": relu,
    "silu": silu,
    "avgpool2d": avgpool2d,
    "global_avgpool": global_avgpool,
    "global_maxpool": global_maxpool,
    "upsample_nearest": upsample_nearest,
    "add": add,
    "mul_scalar": mul_scalar,
    "concat_channels": concat_channels,
    "l1": l1,
    "mse": mse,
    "cross_entropy": cross_entropy,
    "softmax": softmax,
    "group_norm": group_norm,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Evaluate a kernel by name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)
