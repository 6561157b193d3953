"""Blockwise DCT quantisation that reproduces JPEG artifacts without a codec.

Baseline pipeline: 8-bit RGB -> JFIF YCbCr -> optional 4:2:0 chroma
subsampling -> 8x8 DCT -> quantise with the Annex K tables scaled by the IJG
quality rule -> dequantise -> inverse DCT -> RGB, rounded back to 8 bit.

Chroma is subsampled only when ``quality < subsample_below``; at high quality
settings several encoders keep full-resolution chroma, and it keeps q=100
close to lossless.
"""

from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn

LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError(f"quality {quality} outside [1, 100]")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[0], ycc[1] - 128.0, ycc[2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = (-h) % 8, (-w) % 8
    p = np.pad(plane, ((0, ph), (0, pw)), mode="edge") - 128.0
    hb, wb = p.shape[0] // 8, p.shape[1] // 8
    blocks = p.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    coef = np.round(coef / table) * table
    rec = idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    rec = rec.transpose(0, 2, 1, 3).reshape(p.shape) + 128.0
    return rec[:h, :w]


def _subsample(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    p = np.pad(plane, ((0, h % 2), (0, w % 2)), mode="edge")
    return p.reshape(p.shape[0] // 2, 2, p.shape[1] // 2, 2).mean(axis=(1, 3))


def _upsample(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)[:h, :w]


def jpeg_like(img: np.ndarray, quality: int, subsample_below: int = 90) -> np.ndarray:
    """Compress/decompress a (C,H,W) image in [0,1]; C is 1 or 3."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"jpeg_like expects (1|3, H, W), got {img.shape}")
    ql = quant_table(LUMA_TABLE, quality)
    qc = quant_table(CHROMA_TABLE, quality)
    x = np.round(np.clip(img.astype(np.float64), 0.0, 1.0) * 255.0)
    h, w = x.shape[1:]
    if img.shape[0] == 1:
        out = _quantize_plane(x[0], ql)[None]
    else:
        ycc = rgb_to_ycbcr(x)
        planes = [_quantize_plane(ycc[0], ql)]
        for c in (1, 2):
            if quality < subsample_below:
                small = _quantize_plane(_subsample(ycc[c]), qc)
                planes.append(_upsample(small, h, w))
            else:
                planes.append(_quantize_plane(ycc[c], qc))
        out = ycbcr_to_rgb(np.stack(planes))
    out = np.clip(np.round(out), 0.0, 255.0) / 255.0
    return out.astype(img.dtype if img.dtype in (np.float32, np.float64) else np.float32)
