"""Synthetic low-quality images: blur -> downsample -> noise -> JPEG -> upsample.

Resampling is bilinear with half-pixel centres (``align_corners=False``):
output pixel ``i`` samples input coordinate ``(i + 0.5) * in/out - 0.5``,
clamped to ``[0, in - 1]``. The downsampled size is ``floor(size/scale + 0.5)``
(at least 1), and the image is resized back to exactly its original size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
from scipy.ndimage import correlate1d

from .jpeg import jpeg_like

MIXTURE_A = dict(blur_sigma=0.0, scale=8.0, noise_sigma=0.0, jpeg_quality=75)
MIXTURE_B_RANGES = dict(
    blur_sigma=(0.0, 8.0), scale=(1.0, 16.0), noise_sigma=(0.0, 10.0), jpeg_quality=(50, 100)
)
BLUR_SKIP_BELOW = 0.05


@dataclass(frozen=True)
class DegradationRecipe:
    blur_sigma: float
    scale: float
    noise_sigma: float  # in 8-bit intensity levels
    jpeg_quality: int
    seed: int = 0

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be >= 0")
        if not 1 <= int(self.jpeg_quality) <= 100:
            raise ValueError(f"jpeg_quality {self.jpeg_quality} outside [1, 100]")

    def to_line(self) -> str:
        return (
            f"blur_sigma={self.blur_sigma!r}\tscale={self.scale!r}\tnoise_sigma={self.noise_sigma!r}"
            f"\tjpeg_quality={int(self.jpeg_quality)}\tseed={int(self.seed)}"
        )

    @classmethod
    def from_line(cls, line: str) -> "DegradationRecipe":
        fields: dict[str, Any] = {}
        for tok in line.strip().split("\t"):
            key, val = tok.split("=", 1)
            fields[key] = int(val) if key in ("jpeg_quality", "seed") else float(val)
        return cls(**fields)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class DegradedPair:
    hq: np.ndarray
    lq: np.ndarray
    recipe: DegradationRecipe
    label: int


def sample_recipe(mixture: str, rng: np.random.Generator) -> DegradationRecipe:
    seed = int(rng.integers(0, 2**63 - 1))
    mixture = mixture.upper()
    if mixture == "A":
        return DegradationRecipe(seed=seed, **MIXTURE_A)
    if mixture != "B":
        raise ValueError(f"unknown mixture {mixture!r}")
    r = MIXTURE_B_RANGES
    return DegradationRecipe(
        blur_sigma=float(rng.uniform(*r["blur_sigma"])),
        scale=float(rng.uniform(*r["scale"])),
        noise_sigma=float(rng.uniform(*r["noise_sigma"])),
        jpeg_quality=int(rng.integers(r["jpeg_quality"][0], r["jpeg_quality"][1] + 1)),
        seed=seed,
    )


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < BLUR_SKIP_BELOW:
        return img
    k = gaussian_kernel1d(sigma)
    out = correlate1d(img, k, axis=-1, mode="reflect")
    return correlate1d(out, k, axis=-2, mode="reflect")


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of ``img``."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    rows = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def downsampled_size(size: int, scale: float) -> int:
    return max(1, int(math.floor(size / scale + 0.5)))


def degrade(hq: np.ndarray, recipe: DegradationRecipe) -> np.ndarray:
    """Degrade a (C,H,W) image in [0,1]. Deterministic given (hq, recipe)."""
    if recipe.scale < 1:
        raise ValueError(f"scale must be >= 1, got {recipe.scale}")
    hq = np.asarray(hq)
    dtype = hq.dtype if hq.dtype in (np.float32, np.float64) else np.float32
    h, w = hq.shape[-2:]
    x = gaussian_blur(hq.astype(np.float64), recipe.blur_sigma)
    x = resize_bilinear(x, downsampled_size(h, recipe.scale), downsampled_size(w, recipe.scale))
    if recipe.noise_sigma > 0:
        rng = np.random.default_rng(recipe.seed)
        x = x + rng.normal(0.0, recipe.noise_sigma / 255.0, size=x.shape)
    x = jpeg_like(np.clip(x, 0.0, 1.0), int(recipe.jpeg_quality))
    x = resize_bilinear(x.astype(np.float64), h, w)
    return np.clip(x, 0.0, 1.0).astype(dtype)


def degrade_batch(hq: np.ndarray, recipes) -> np.ndarray:
    return np.stack([degrade(img, r) for img, r in zip(hq, recipes)])
