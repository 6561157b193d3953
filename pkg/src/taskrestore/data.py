"""Procedural labelled shapes used in place of a natural-image dataset.

Each image is a textured background with one small textured shape drawn
anti-aliased (4x supersampling). Classes: 0 circle, 1 square, 2 triangle,
3 cross. Heavy downsampling reduces a shape to a blob whose corners are gone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("circle", "square", "triangle", "cross")
SUPERSAMPLE = 4
MAX_TILT = np.pi / 12


@dataclass
class ToyCorpus:
    train_images: np.ndarray  # (N,3,H,W) float32 in [0,1]
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    seed: int

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES)

    @property
    def image_size(self) -> int:
        return self.train_images.shape[-1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.train_images, self.train_labels, self.val_images, self.val_labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray, radius: float) -> np.ndarray:
    """u, v are rotated coordinates relative to the shape centre."""
    if cls == 0:
        return u**2 + v**2 <= radius**2
    if cls == 1:
        r = radius * 0.85
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    if cls == 2:
        # equilateral triangle with circumradius ~ 1.2 * radius
        R = radius * 1.2
        inside = v >= -0.5 * R
        inside &= (np.sqrt(3) * u - v) >= -R
        inside &= (-np.sqrt(3) * u - v) >= -R
        return inside
    if cls == 3:
        arm = radius * 0.38
        r = radius * 1.05
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    raise ValueError(cls)


def _texture(rng: np.random.Generator, size: int, amp: float) -> np.ndarray:
    """Fine-scale grating plus per-pixel grain."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    grating = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    grain = rng.uniform(-1, 1, (size, size))
    return amp * (0.6 * grating + 0.4 * grain)


def _color_pair(rng: np.random.Generator):
    while True:
        bg = rng.uniform(0.1, 0.9, 3)
        fg = rng.uniform(0.1, 0.9, 3)
        if np.abs(fg - bg).mean() > 0.25:
            return bg, fg


def render(cls: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    s = size * SUPERSAMPLE
    radius = rng.uniform(0.14, 0.24) * size
    margin = radius * 1.3 + 1
    cy, cx = rng.uniform(margin, size - margin, 2)
    angle = rng.uniform(-MAX_TILT, MAX_TILT)
    yy, xx = (np.mgrid[0:s, 0:s] + 0.5) / SUPERSAMPLE
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    mask = _shape_mask(cls, u, v, radius).astype(np.float64)
    mask = mask.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    bg, fg = _color_pair(rng)
    tex_bg = _texture(rng, size, rng.uniform(0.03, 0.08))
    tex_fg = _texture(rng, size, rng.uniform(0.03, 0.08))
    img = (1 - mask)[None] * (bg[:, None, None] + tex_bg[None]) + mask[None] * (
        fg[:, None, None] + tex_fg[None]
    )
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _make_split(rng: np.random.Generator, n: int, size: int, num_classes: int):
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.stack([render(int(c), rng, size) for c in labels]) if n else np.zeros((0, 3, size, size), np.float32)
    return images, labels.astype(np.int64)


def synthesize_corpus(seed: int, n_train: int, n_val: int, size: int = 64) -> ToyCorpus:
    k = len(CLASS_NAMES)
    if n_train < k or n_val < k:
        raise ValueError(f"need at least {k} images per split")
    train_rng, val_rng = (np.random.default_rng([seed, i]) for i in (0, 1))
    tr_x, tr_y = _make_split(train_rng, n_train, size, k)
    va_x, va_y = _make_split(val_rng, n_val, size, k)
    return ToyCorpus(tr_x, tr_y, va_x, va_y, seed)
