"""Haar low/high frequency split used for colour correction.

``low`` is the multi-level Haar approximation reconstructed with every detail
band zeroed; ``high`` is the residual ``img - low`` so the two always add back
to the input exactly. For orthonormal Haar the level-k approximation equals
the mean over aligned 2^k x 2^k blocks, which is what the differentiable path
in :func:`low_pass_tensor` uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops


@dataclass
class FrequencySplit:
    low: np.ndarray
    high: np.ndarray
    levels: int


def haar_dwt2(x: np.ndarray):
    """One analysis level over the last two axes (even sizes required).

    Returns (approx, (horizontal, vertical, diagonal)).
    """
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, (lh, hl, hh)


def haar_idwt2(ll: np.ndarray, details) -> np.ndarray:
    lh, hl, hh = details
    out = np.empty(ll.shape[:-2] + (ll.shape[-2] * 2, ll.shape[-1] * 2), dtype=ll.dtype)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def _pad_to_multiple(img: np.ndarray, m: int):
    h, w = img.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return img, h, w
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="reflect" if min(h, w) > 1 else "edge"), h, w


def low_pass(img: np.ndarray, levels: int = 2) -> np.ndarray:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    x = np.asarray(img, dtype=np.float64)
    padded, h, w = _pad_to_multiple(x, 2**levels)
    approx = padded
    shapes = []
    for _ in range(levels):
        approx, det = haar_dwt2(approx)
        shapes.append(det[0].shape)
    for shp in reversed(shapes):
        zeros = np.zeros(shp)
        approx = haar_idwt2(approx, (zeros, zeros, zeros))
    return approx[..., :h, :w].astype(np.asarray(img).dtype)


def split(img: np.ndarray, levels: int = 2) -> FrequencySplit:
    """Works on (C,H,W) or (N,C,H,W); channels are independent."""
    img = np.asarray(img)
    low = low_pass(img, levels)
    return FrequencySplit(low=low, high=img - low, levels=levels)


def recombine(generated: np.ndarray, pre_restored: np.ndarray, levels: int = 2) -> np.ndarray:
    """High band of ``generated`` plus low band of ``pre_restored``, clipped to [0,1]."""
    generated, pre_restored = np.asarray(generated), np.asarray(pre_restored)
    if generated.shape != pre_restored.shape:
        raise ValueError(
            f"recombine: shape mismatch {generated.shape} vs {pre_restored.shape}"
        )
    out = split(generated, levels).high + split(pre_restored, levels).low
    return np.clip(out, 0.0, 1.0)


# --- autodiff path ---------------------------------------------------------


def low_pass_tensor(x: Tensor, levels: int = 2) -> Tensor:
    k = 2**levels
    if x.shape[2] % k or x.shape[3] % k:
        raise ValueError(f"low_pass_tensor needs spatial dims divisible by {k}, got {x.shape}")
    return ops.upsample_nearest(ops.avgpool2d(x, k), k)


def recombine_tensor(generated: Tensor, pre_restored, levels: int = 2) -> Tensor:
    """Differentiable in ``generated``; ``pre_restored`` is treated as constant."""
    pre = pre_restored.data if isinstance(pre_restored, Tensor) else np.asarray(pre_restored)
    if generated.shape != pre.shape:
        raise ValueError(f"recombine: shape mismatch {generated.shape} vs {pre.shape}")
    high = ops.sub(generated, low_pass_tensor(generated, levels))
    low = Tensor(low_pass(pre, levels).astype(generated.dtype))
    return ops.clamp(ops.add(high, low), 0.0, 1.0)
