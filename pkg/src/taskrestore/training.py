"""Restoration and task losses, and the alternating joint-training loop.

Each iteration has two phases that touch disjoint weights:

1. restorer phase: one-step restoration at a timestep drawn from the plan,
   scored by the high-level feature loss through the frozen task nets;
   updates the denoiser (and trainable decoder) with AdamW.
2. task phase: full n-step restoration without gradients, a half restored /
   half HQ batch, cross-entropy plus alpha * feature matching; updates the
   task net with momentum SGD.

Randomness for iteration ``i`` comes from ``default_rng([seed, i])`` so a
run resumed from a checkpoint replays the same batches.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from .autodiff import SGD, AdamW, Tensor, backward, cosine_lr, frozen, load_checkpoint, no_grad, ops, save_checkpoint
from .data import ToyCorpus
from .degradation import degrade_batch, sample_recipe
from .networks import TaskNet
from .pipeline import TrainState, one_step_restore, pre_restore, restore_pipeline

log = logging.getLogger(__name__)

HLF_SPACES = ("both", "task", "hq")
RESTORER_OBJECTIVES = ("hlf", "eps")


class TrainingError(RuntimeError):
    """Raised on a non-finite loss; carries the iteration and phase."""

    def __init__(self, msg: str, iteration: int, phase: str):
        super().__init__(f"{msg} (iteration {iteration}, phase {phase})")
        self.iteration = iteration
        self.phase = phase


# ------------------------------------------------------------------ losses


def _check_features(H: TaskNet, H_hq: TaskNet):
    if H.feature_dim != H_hq.feature_dim:
        raise ValueError(f"feature dims differ: H {H.feature_dim} vs H_HQ {H_hq.feature_dim}")


def hlf_loss(restored, hq, H: TaskNet, H_hq: TaskNet, spaces: str = "both") -> Tensor:
    """Mean-L1 feature distance to HQ, averaged over the two feature spaces.

    ``spaces`` selects both nets ("both"), only the trainable task net
    ("task") or only the frozen HQ net ("hq"). Targets are constants.
    """
    if spaces not in HLF_SPACES:
        raise ValueError(f"spaces must be one of {HLF_SPACES}")
    _check_features(H, H_hq)
    restored = restored if isinstance(restored, Tensor) else Tensor(restored)
    hq = hq.data if isinstance(hq, Tensor) else np.asarray(hq)
    terms = []
    for net, on in ((H, spaces != "hq"), (H_hq, spaces != "task")):
        if not on:
            continue
        with no_grad():
            target = net.features(hq).data
        terms.append(ops.l1(net.features(restored), Tensor(target)))
    if len(terms) == 1:
        return terms[0]
    return ops.mul_scalar(ops.add(*terms), 0.5)


def _mixed_batch(restored, hq):
    restored = restored.data if isinstance(restored, Tensor) else np.asarray(restored)
    hq = hq.data if isinstance(hq, Tensor) else np.asarray(hq)
    if restored.shape != hq.shape:
        raise ValueError(f"restored {restored.shape} vs HQ {hq.shape}")
    b = len(hq)
    if b % 2:
        raise ValueError(f"batch size must be even, got {b}")
    return np.concatenate([restored[: b // 2], hq[b // 2 :]]), hq


def task_loss(restored, hq, labels, H: TaskNet, reduction: str = "mean") -> Tensor:
    """Cross-entropy of H on the first half of ``restored`` joined to the
    second half of ``hq``; ``labels`` index the full batch."""
    mix, _ = _mixed_batch(restored, hq)
    return ops.cross_entropy(H.logits(mix), np.asarray(labels), reduction=reduction)


def fm_loss(restored, hq, H: TaskNet, H_hq: TaskNet) -> Tensor:
    """Mean-L1 between H features of the mixed batch and H_HQ features of HQ."""
    _check_features(H, H_hq)
    mix, hq = _mixed_batch(restored, hq)
    with no_grad():
        target = H_hq.features(hq).data
    return ops.l1(H.features(mix), Tensor(target))


def eps_loss(state: TrainState, hq, z_pre: Tensor, rng: np.random.Generator, t_max: int) -> Tensor:
    """Conventional noise prediction anchored on the HQ latent, t ~ U[1, t_max]."""
    with no_grad():
        z0 = state.codec.encode(hq).data
    t = int(rng.integers(1, t_max + 1))
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    z_t = np.sqrt(state.sched.alpha_bar[t]).astype(z0.dtype) * z0 + np.sqrt(
        1.0 - state.sched.alpha_bar[t]
    ).astype(z0.dtype) * eps
    return ops.mse(state.denoiser(z_t, t, z_pre), Tensor(eps))


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    N: int = 10000
    lr_edtr: float = 1e-4
    lr_task: float = 5e-3
    cosine: bool = True
    alpha: float = 1.0
    batch: int = 16
    t_p: int = 200
    T: int = 1000
    n: int = 1
    seed: int = 0
    mixture: str = "B"
    momentum: float = 0.9
    weight_decay: float = 0.0
    hlf_spaces: str = "both"
    restorer_objective: str = "hlf"
    train_restorer: bool = True
    train_task: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch < 2 or self.batch % 2:
            raise ValueError(f"batch must be even and positive, got {self.batch}")
        if self.N < 0:
            raise ValueError(f"N must be >= 0, got {self.N}")
        if not 1 <= self.n <= self.t_p <= self.T:
            raise ValueError(f"need 1 <= n <= t_p <= T, got n={self.n} t_p={self.t_p} T={self.T}")
        if self.hlf_spaces not in HLF_SPACES:
            raise ValueError(f"hlf_spaces must be one of {HLF_SPACES}")
        if self.restorer_objective not in RESTORER_OBJECTIVES:
            raise ValueError(f"restorer_objective must be one of {RESTORER_OBJECTIVES}")


@dataclass
class LossReport:
    iteration: int
    hlf: float
    task: float
    fm: float
    combined_tasknet: float
    lr_edtr: float
    lr_task: float

    CSV_FIELDS = ("iteration", "hlf", "task", "fm", "lr_edtr", "lr_task")

    def row(self) -> list[str]:
        return [str(self.iteration)] + [repr(float(getattr(self, k))) for k in self.CSV_FIELDS[1:]]


# -------------------------------------------------------------- batching


def iteration_rng(seed: int, iteration: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, iteration])


def sample_batch(corpus: ToyCorpus, batch: int, mixture: str, rng: np.random.Generator):
    """HQ batch, freshly degraded LQ, labels and recipes."""
    idx = rng.choice(len(corpus.train_images), size=batch, replace=False)
    hq = corpus.train_images[idx]
    recipes = [sample_recipe(mixture, rng) for _ in range(batch)]
    return hq, degrade_batch(hq, recipes), corpus.train_labels[idx], recipes


# ------------------------------------------------------------------- loop


@dataclass
class JointTrainer:
    """Owns the optimizers for one joint-training run over a TrainState."""

    config: TrainConfig
    corpus: ToyCorpus
    state: TrainState
    opt_edtr: AdamW = field(init=False)
    opt_task: SGD = field(init=False)

    def __post_init__(self):
        c = self.config
        self.opt_edtr = AdamW(self.state.edtr_parameters(), lr=c.lr_edtr, weight_decay=c.weight_decay)
        self.opt_task = SGD(self.state.task_parameters(), lr=c.lr_task, momentum=c.momentum,
                            weight_decay=c.weight_decay)
        self.plan = self.state.inference_plan(c.t_p, c.n)

    def lrs(self, it: int) -> tuple[float, float]:
        c = self.config
        if not c.cosine:
            return c.lr_edtr, c.lr_task
        return cosine_lr(c.lr_edtr, it, c.N), cosine_lr(c.lr_task, it, c.N)

    def _finite(self, value: float, it: int, phase: str, what: str) -> float:
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {what} loss {value}", it, phase)
        return value

    def restorer_phase(self, it: int, hq, pre: Tensor, z_pre: Tensor, rng) -> float:
        c, s = self.config, self.state
        # the timestep is drawn from the inference plan regardless of n
        t = int(rng.choice(self.plan.steps))
        eps = rng.standard_normal(z_pre.shape).astype(z_pre.dtype)
        if not c.train_restorer:
            with no_grad():
                out = one_step_restore(s, pre, z_pre, t, eps)
                return float(hlf_loss(out, hq, s.task, s.task_hq, c.hlf_spaces).item())
        with frozen(s.task, s.task_hq, s.prerestorer, s.codec):
            # decoder weights stay trainable unless frozen in the state
            for p in s.edtr_parameters().values():
                p.requires_grad = True
            if c.restorer_objective == "hlf":
                out = one_step_restore(s, pre, z_pre, t, eps)
                loss = hlf_loss(out, hq, s.task, s.task_hq, c.hlf_spaces)
            else:
                loss = eps_loss(s, hq, z_pre, rng, s.sched.T)
            value = self._finite(float(loss.item()), it, "restorer", "hlf")
            self.opt_edtr.zero_grad()
            backward(loss)
            self.opt_edtr.step()
        return value

    def task_phase(self, it: int, hq, lq, labels, rng) -> tuple[float, float]:
        c, s = self.config, self.state
        restored = restore_pipeline(lq, self.plan, s, rng)
        if not c.train_task:
            with no_grad():
                return (float(task_loss(restored, hq, labels, s.task).item()),
                        float(fm_loss(restored, hq, s.task, s.task_hq).item()))
        edtr = list(s.edtr_parameters().values())
        saved = [p.requires_grad for p in edtr]
        for p in edtr:
            p.requires_grad = False
        try:
            with frozen(s.task_hq, s.prerestorer, s.denoiser, s.codec):
                lt = task_loss(restored, hq, labels, s.task)
                if c.alpha:
                    lf = fm_loss(restored, hq, s.task, s.task_hq)
                    total = ops.add(lt, ops.mul_scalar(lf, c.alpha))
                    fm_value = float(lf.item())
                else:
                    total = lt
                    with no_grad():
                        fm_value = float(fm_loss(restored, hq, s.task, s.task_hq).item())
                task_value = self._finite(float(lt.item()), it, "task", "task")
                self._finite(fm_value, it, "task", "fm")
                self.opt_task.zero_grad()
                backward(total)
                self.opt_task.step()
        finally:
            for p, flag in zip(edtr, saved):
                p.requires_grad = flag
        return task_value, fm_value

    def step(self) -> LossReport:
        c, s = self.config, self.state
        it = s.iteration
        rng = iteration_rng(c.seed, it)
        lr_e, lr_t = self.lrs(it)
        self.opt_edtr.lr, self.opt_task.lr = lr_e, lr_t
        hq, lq, labels, _ = sample_batch(self.corpus, c.batch, c.mixture, rng)
        pre, z_pre = pre_restore(s, lq)
        hlf = self.restorer_phase(it, hq, pre, z_pre, rng)
        task, fm = self.task_phase(it, hq, lq, labels, rng)
        s.iteration = it + 1
        return LossReport(it, hlf, task, fm, task + c.alpha * fm, lr_e, lr_t)

    def run(self, until: int | None = None, on_report: Callable[[LossReport], None] | None = None,
            checkpoint_path: str | None = None) -> Iterator[LossReport]:
        until = self.config.N if until is None else min(until, self.config.N)
        while self.state.iteration < until:
            rep = self.step()
            if on_report is not None:
                on_report(rep)
            yield rep
            every = self.config.checkpoint_every
            if checkpoint_path and every and self.state.iteration % every == 0:
                save_state(checkpoint_path, self)

    # -------------------------------------------------------- persistence

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in self.state.all_modules().items():
            for k, v in mod.state_dict().items():
                out[f"{name}.{k}"] = v
        for k, v in self.opt_edtr.state_dict().items():
            out[f"opt_edtr.{k}"] = v
        for k, v in self.opt_task.state_dict().items():
            out[f"opt_task.{k}"] = v
        return out


def save_state(path: str, trainer: JointTrainer) -> None:
    meta = {"iteration": trainer.state.iteration, "config": asdict(trainer.config)}
    save_checkpoint(path, trainer.tensors(), meta)


def load_state(path: str, trainer: JointTrainer) -> None:
    tensors, meta = load_checkpoint(path)
    for name, mod in trainer.state.all_modules().items():
        pre = name + "."
        mod.load_state_dict({k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)})
    for opt, pre in ((trainer.opt_edtr, "opt_edtr."), (trainer.opt_task, "opt_task.")):
        opt.load_state_dict({k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)})
    trainer.state.iteration = int(meta["iteration"])


class LossLog:
    """Appends LossReports to a CSV file."""

    def __init__(self, path: str, append: bool = False):
        self.path = path
        new = not (append and os.path.exists(path))
        self._fh = open(path, "a" if not new else "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(LossReport.CSV_FIELDS)

    def __call__(self, rep: LossReport) -> None:
        self._w.writerow(rep.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train_joint(config: TrainConfig, corpus: ToyCorpus, state: TrainState,
                log_path: str | None = None) -> list[LossReport]:
    """Run joint training to ``config.N`` and return the loss stream."""
    trainer = JointTrainer(config, corpus, state)
    reports = []
    logger = LossLog(log_path, append=state.iteration > 0) if log_path else None
    try:
        for rep in trainer.run(on_report=logger):
            reports.append(rep)
            if rep.iteration % 50 == 0:
                log.info("joint it=%d hlf=%.4f task=%.4f fm=%.4f", rep.iteration, rep.hlf, rep.task, rep.fm)
    finally:
        if logger:
            logger.close()
    return reports
