"""Restoration pipeline: pre-restore, encode, diffuse, denoise, decode, correct."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .diffusion import NoiseSchedule, TimestepPlan, forward_diffuse, make_plan, n_step_denoise, one_step_denoise
from .networks import ConditionalDenoiser, IdentityRestorer, LatentCodec, PreRestorer, TaskNet
from .wavelet import recombine_tensor


@dataclass
class PipelineOptions:
    use_prerestorer: bool = True
    partial_diffusion: bool = True
    color_correction: bool = True
    wavelet_levels: int = 2


@dataclass
class TrainState:
    prerestorer: PreRestorer
    codec: LatentCodec
    denoiser: ConditionalDenoiser
    task: TaskNet
    task_hq: TaskNet
    sched: NoiseSchedule
    options: PipelineOptions = field(default_factory=PipelineOptions)
    freeze_decoder: bool = False
    iteration: int = 0
    seed: int = 0
    opt_state: dict = field(default_factory=dict)

    @property
    def restorer(self):
        return self.prerestorer if self.options.use_prerestorer else IdentityRestorer()

    def edtr_parameters(self) -> "OrderedDict[str, Tensor]":
        """Trainable restoration weights: denoiser, plus decoder unless frozen."""
        out = self.denoiser.named_parameters("denoiser.")
        if not self.freeze_decoder:
            out.update(self.codec.decoder_params())
        return out

    def task_parameters(self) -> "OrderedDict[str, Tensor]":
        return self.task.named_parameters("task.")

    def all_modules(self) -> dict:
        return {
            "prerestorer": self.prerestorer,
            "codec": self.codec,
            "denoiser": self.denoiser,
            "task": self.task,
            "task_hq": self.task_hq,
        }

    def inference_plan(self, t_p: int, n: int) -> TimestepPlan:
        # without partial diffusion the sampler starts from pure noise at T
        if self.options.partial_diffusion:
            return make_plan(t_p, n, self.sched.T)
        return make_plan(self.sched.T, n, self.sched.T)


def pre_restore(state: TrainState, lq) -> tuple[Tensor, Tensor]:
    """R_pix(LQ) and its latent, both detached."""
    with no_grad():
        pre = state.restorer(lq)
        z_pre = state.codec.encode(pre)
    return Tensor(pre.data), Tensor(z_pre.data)


def decode_and_correct(state: TrainState, z_hat, pre) -> Tensor:
    img = state.codec.decode(z_hat)
    if state.options.color_correction:
        return recombine_tensor(img, pre, state.options.wavelet_levels)
    return ops.clamp(img, 0.0, 1.0)


def one_step_restore(state: TrainState, pre: Tensor, z_pre: Tensor, t: int, eps: np.ndarray) -> Tensor:
    """Training-time restoration: diffuse to t, denoise once, decode, correct.

    Recorded on the tape when any trainable weight requires grad.
    """
    z_t = forward_diffuse(z_pre.data, t, eps.astype(z_pre.dtype), state.sched)
    z_hat = one_step_denoise(Tensor(z_t), t, z_pre, state.denoiser, state.sched)
    return decode_and_correct(state, z_hat, pre)


def restore_pipeline(lq, plan: TimestepPlan, state: TrainState, rng: np.random.Generator,
                     chunk: int = 32) -> np.ndarray:
    """Full n-step restoration of a batch (N,C,H,W); returns numpy in [0,1]."""
    lq = np.asarray(lq.data if isinstance(lq, Tensor) else lq)
    outs = []
    with no_grad():
        for i in range(0, len(lq), chunk):
            pre, z_pre = pre_restore(state, lq[i : i + chunk])
            z = n_step_denoise(
                z_pre, plan, state.denoiser, state.sched, rng,
                start_from_noise=not state.options.partial_diffusion,
            )
            outs.append(decode_and_correct(state, z, pre).data)
    out = np.concatenate(outs) if outs else np.zeros_like(lq)
    return out.astype(lq.dtype, copy=False)


def prerestore_only(lq, state: TrainState, chunk: int = 64) -> np.ndarray:
    lq = np.asarray(lq)
    with no_grad():
        return np.concatenate([state.prerestorer(lq[i : i + chunk]).data for i in range(0, len(lq), chunk)])
