"""Stages that run before joint training.

- HQ task net (H_HQ): cross-entropy on clean images.
- Pre-restorer: pixel L1 on freshly degraded pairs.
- Latent autoencoder (tiny_ae codec only): pixel MSE reconstruction.
- Denoiser prior: the conventional noise-prediction objective on HQ latents,
  conditioned on pre-restored latents. Stands in for a pretrained diffusion
  model; optional.
- Baseline task nets: H_HQ copies fine-tuned on LQ or pre-restored images.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import SGD, AdamW, Module, Tensor, backward, cosine_lr, frozen, no_grad, ops
from .data import ToyCorpus
from .networks import LatentCodec, PreRestorer, TaskNet
from .pipeline import TrainState, pre_restore
from .training import eps_loss, iteration_rng, sample_batch

log = logging.getLogger(__name__)

# rng stream ids, one per stage, so stages never share draws
STREAM_TASK_HQ, STREAM_RESTORER, STREAM_CODEC, STREAM_PRIOR, STREAM_BASELINE = 11, 12, 13, 14, 15


class StageError(RuntimeError):
    def __init__(self, stage: str, iteration: int, msg: str):
        super().__init__(f"stage {stage} failed at iteration {iteration}: {msg}")
        self.stage = stage
        self.iteration = iteration


@dataclass
class PretrainConfig:
    batch: int = 16
    mixture: str = "B"
    task_hq_iters: int = 1000
    task_hq_lr: float = 2e-3
    restorer_iters: int = 400
    restorer_lr: float = 2e-3
    codec_iters: int = 400
    codec_lr: float = 2e-3
    prior_iters: int = 0
    prior_lr: float = 1e-3
    baseline_iters: int = 300
    baseline_lr: float = 5e-3
    seed: int = 0


def _fit(stage: str, named_params, optimizer, loss_fn: Callable[[int, np.random.Generator], Tensor],
         iters: int, seed: int, stream: int, base_lr: float) -> list[float]:
    losses = []
    for it in range(iters):
        rng = iteration_rng(seed, it, stream)
        optimizer.lr = cosine_lr(base_lr, it, iters)
        loss = loss_fn(it, rng)
        value = float(loss.item())
        if not math.isfinite(value):
            raise StageError(stage, it, f"non-finite loss {value}")
        optimizer.zero_grad()
        backward(loss)
        optimizer.step()
        losses.append(value)
        if it % 100 == 0:
            log.info("%s it=%d loss=%.4f", stage, it, value)
    return losses


def train_tasknet(net: TaskNet, corpus: ToyCorpus, inputs: Callable, iters: int, lr: float,
                  batch: int, mixture: str, seed: int, stream: int, stage: str,
                  optimizer: str = "sgd") -> list[float]:
    """Cross-entropy training of ``net`` on ``inputs(hq, lq)``."""
    if optimizer == "adamw":
        opt = AdamW(net.named_parameters(), lr=lr)
    else:
        opt = SGD(net.named_parameters(), lr=lr, momentum=0.9)

    def loss_fn(it, rng):
        hq, lq, labels, _ = sample_batch(corpus, batch, mixture, rng)
        x = inputs(hq, lq)
        return ops.cross_entropy(net.logits(x), labels)

    return _fit(stage, opt.params, opt, loss_fn, iters, seed, stream, lr)


def pretrain_hq_tasknet(corpus: ToyCorpus, cfg: PretrainConfig, widths=(16, 32, 64)) -> tuple[TaskNet, list[float]]:
    net = TaskNet(widths=widths, num_classes=corpus.num_classes, seed=np.random.default_rng([cfg.seed, STREAM_TASK_HQ]))
    # the degraded half of the batch is unused; the fixed recipe is the cheapest
    losses = train_tasknet(net, corpus, lambda hq, lq: hq, cfg.task_hq_iters, cfg.task_hq_lr, cfg.batch,
                           "A", cfg.seed, STREAM_TASK_HQ, "pretrain-task", optimizer="adamw")
    return net, losses


def pretrain_prerestorer(corpus: ToyCorpus, cfg: PretrainConfig, width: int = 16) -> tuple[PreRestorer, list[float]]:
    net = PreRestorer(width=width, seed=np.random.default_rng([cfg.seed, STREAM_RESTORER]))
    opt = AdamW(net.named_parameters(), lr=cfg.restorer_lr)

    def loss_fn(it, rng):
        hq, lq, _, _ = sample_batch(corpus, cfg.batch, cfg.mixture, rng)
        return ops.l1(net(lq), Tensor(hq))

    losses = _fit("pretrain-restorer", opt.params, opt, loss_fn, cfg.restorer_iters, cfg.seed,
                  STREAM_RESTORER, cfg.restorer_lr)
    return net, losses


def pretrain_codec(corpus: ToyCorpus, cfg: PretrainConfig, mode: str = "identity",
                   latent_channels: int = 8, width: int = 16) -> tuple[LatentCodec, list[float]]:
    codec = LatentCodec(mode, latent_channels=latent_channels, width=width,
                        seed=np.random.default_rng([cfg.seed, STREAM_CODEC]))
    if mode == "identity":
        return codec, []
    opt = AdamW(codec.named_parameters(), lr=cfg.codec_lr)

    def loss_fn(it, rng):
        idx = rng.choice(len(corpus.train_images), size=cfg.batch, replace=False)
        x = corpus.train_images[idx]
        return ops.mse(codec.decode(codec.encode(x)), Tensor(x))

    losses = _fit("pretrain-codec", opt.params, opt, loss_fn, cfg.codec_iters, cfg.seed, STREAM_CODEC, cfg.codec_lr)
    return codec, losses


def pretrain_prior(corpus: ToyCorpus, state: TrainState, cfg: PretrainConfig) -> list[float]:
    """Noise-prediction warm-up of the denoiser; everything else frozen."""
    if cfg.prior_iters <= 0:
        return []
    opt = AdamW(state.denoiser.named_parameters(), lr=cfg.prior_lr)

    def loss_fn(it, rng):
        hq, lq, _, _ = sample_batch(corpus, cfg.batch, cfg.mixture, rng)
        _, z_pre = pre_restore(state, lq)
        with frozen(state.codec, state.prerestorer):
            return eps_loss(state, hq, z_pre, rng, state.sched.T)

    return _fit("pretrain-prior", opt.params, opt, loss_fn, cfg.prior_iters, cfg.seed, STREAM_PRIOR, cfg.prior_lr)


def finetune_baseline(task_hq: TaskNet, corpus: ToyCorpus, cfg: PretrainConfig,
                      restorer: Module | None = None, stream_offset: int = 0) -> tuple[TaskNet, list[float]]:
    """Copy of H_HQ trained on LQ images, or on ``restorer(LQ)`` when given."""
    net = task_hq.clone()

    def inputs(hq, lq):
        if restorer is None:
            return lq
        with no_grad():
            return restorer(lq).data

    name = "baseline-lq" if restorer is None else "baseline-prerestored"
    losses = train_tasknet(net, corpus, inputs, cfg.baseline_iters, cfg.baseline_lr, cfg.batch, cfg.mixture,
                           cfg.seed, STREAM_BASELINE + stream_offset, name)
    return net, losses
