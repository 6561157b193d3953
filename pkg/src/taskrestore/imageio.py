"""8-bit PNG I/O, sample grids and line charts."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C,H,W) float in [0,1] -> (H,W,C) uint8."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected (C,H,W), got {img.shape}")
    out = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return out.transpose(1, 2, 0)


def save_png(path: str, img: np.ndarray) -> None:
    arr = to_uint8(img)
    mode = "L" if arr.shape[2] == 1 else "RGB"
    Image.fromarray(arr[:, :, 0] if mode == "L" else arr, mode).save(path)


def load_png(path: str) -> np.ndarray:
    """PNG -> (3,H,W) float32 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def image_grid(rows: list[np.ndarray], pad: int = 2) -> np.ndarray:
    """Tile equal-length lists of (C,H,W) images into one image, one list per row."""
    if not rows or not len(rows[0]):
        raise ValueError("empty grid")
    c, h, w = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    grid = np.ones((c, len(rows) * (h + pad) + pad, ncol * (w + pad) + pad), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[:, y : y + h, x : x + w] = img
    return grid


def line_chart(path: str, series: dict[str, list[float]], title: str = "", xlabel: str = "iteration") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, ys in series.items():
        ax.plot(np.arange(len(ys)), ys, label=name, linewidth=1)
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
