"""Accuracy, PSNR and feature distance for restored images."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import no_grad
from .networks import TaskNet


@dataclass
class EvalReport:
    accuracy: float
    psnr_db: float
    f_d: float
    n_samples: int
    run_accuracies: tuple = ()

    def as_row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "psnr_db": self.psnr_db,
            "f_d": self.f_d,
            "n_samples": self.n_samples,
        }


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0,1]; inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _batched(fn, x, chunk=64):
    with no_grad():
        return np.concatenate([fn(x[i : i + chunk]).data for i in range(0, len(x), chunk)])


def per_sample_feature_distance(restored, hq, H_hq: TaskNet) -> np.ndarray:
    fr = _batched(H_hq.features, np.asarray(restored)).astype(np.float64)
    fh = _batched(H_hq.features, np.asarray(hq)).astype(np.float64)
    return np.abs(fr - fh).mean(axis=1)


def feature_distance(restored, hq, H_hq: TaskNet) -> float:
    """Mean over samples of the mean-abs feature difference under H_HQ."""
    if np.shape(restored) != np.shape(hq):
        raise ValueError(f"feature_distance: shape mismatch {np.shape(restored)} vs {np.shape(hq)}")
    return float(per_sample_feature_distance(restored, hq, H_hq).mean())


def accuracy(images, labels, H: TaskNet) -> float:
    logits = _batched(H.logits, np.asarray(images))
    labels = np.asarray(labels)
    return int((logits.argmax(axis=1) == labels).sum()) / len(labels)


def evaluate(restore: Callable[[np.ndarray, np.random.Generator], np.ndarray], lq, hq, labels,
             H: TaskNet, H_hq: TaskNet, base_seed: int = 0, runs: int = 4) -> EvalReport:
    """Accuracy averaged over ``runs`` restorations with fresh noise per run;
    PSNR and feature distance from the first run."""
    accs = []
    first = None
    for r in range(runs):
        out = restore(lq, np.random.default_rng([base_seed, 1000 + r]))
        if first is None:
            first = out
        accs.append(accuracy(out, labels, H))
    return EvalReport(
        accuracy=float(np.mean(accs)),
        psnr_db=psnr(first, hq),
        f_d=feature_distance(first, hq, H_hq),
        n_samples=len(labels),
        run_accuracies=tuple(accs),
    )
