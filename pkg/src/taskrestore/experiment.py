"""End-to-end runs: pretraining, baselines, joint training, evaluation, ablations.

A run directory contains::

    config.ini           exact config used
    corpus.sha256        digest of the generated corpus
    checkpoints/*.ckpt   one file per network (and the joint trainer state)
    logs/*.csv           per-stage losses; joint.csv is the LossReport stream
    summary.csv          one row per method (deterministic given the config)
    ablation.csv         one row per ablation cell (``ablate`` only)
    samples.png          LQ / pre-restored / EDTR / HQ for a few val images
    losses.png           joint-training loss curves
    timings.json         wall-clock per stage (not part of the reproducible set)
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .autodiff import Module, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import ToyCorpus, synthesize_corpus
from .degradation import degrade_batch, sample_recipe
from .diffusion import make_schedule
from .imageio import image_grid, line_chart, save_png
from .metrics import EvalReport, accuracy, evaluate, feature_distance, psnr
from .networks import ConditionalDenoiser, LatentCodec, PreRestorer, TaskNet
from .pipeline import PipelineOptions, TrainState, prerestore_only, restore_pipeline
from .pretrain import (
    StageError,
    finetune_baseline,
    pretrain_codec,
    pretrain_hq_tasknet,
    pretrain_prerestorer,
    pretrain_prior,
)
from .training import JointTrainer, LossLog, TrainingError, load_state, save_state, train_joint

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "TASKRESTORE_OUT"
EVAL_STREAM = 77
SUMMARY_FIELDS = ("method", "n", "accuracy", "psnr_db", "f_d", "n_samples", "run_accuracies")
ABLATION_FIELDS = (
    "cell", "sd_prior", "hlf", "fm", "pre_restoration", "partial_diffusion", "n",
    "accuracy", "psnr_db", "f_d",
)


def output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


@contextlib.contextmanager
def stage(name: str, timings: dict | None = None):
    """Label failures with the stage that raised them."""
    t0 = time.perf_counter()
    try:
        yield
    except (StageError, TrainingError):
        raise
    except Exception as err:
        raise StageError(name, -1, f"{type(err).__name__}: {err}") from err
    finally:
        if timings is not None:
            timings[name] = round(time.perf_counter() - t0, 2)


# ------------------------------------------------------------ construction


def make_corpus(cfg: ExperimentConfig) -> ToyCorpus:
    c = cfg.corpus
    return synthesize_corpus(cfg.seed, c.n_train, c.n_val, c.size)


def eval_set(cfg: ExperimentConfig, corpus: ToyCorpus) -> np.ndarray:
    """Held-out LQ images; one fixed recipe per val image."""
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    recipes = [sample_recipe(cfg.mixture, rng) for _ in range(len(corpus.val_images))]
    return degrade_batch(corpus.val_images, recipes)


def _alpha_bar(cfg: ExperimentConfig):
    return make_schedule(cfg.train.T).alpha_bar if cfg.networks.anchored_denoiser else None


def new_denoiser(cfg: ExperimentConfig, codec: LatentCodec) -> ConditionalDenoiser:
    n = cfg.networks
    return ConditionalDenoiser(codec.latent_channels, n.denoiser_width, n.emb_dim,
                               seed=np.random.default_rng([cfg.seed, 21]), alpha_bar=_alpha_bar(cfg))


def make_state(cfg: ExperimentConfig, task_hq: TaskNet, prerestorer: PreRestorer, codec: LatentCodec,
               denoiser: ConditionalDenoiser, options: PipelineOptions | None = None) -> TrainState:
    """Fresh TrainState with H initialised as a copy of H_HQ; copies every net."""
    return TrainState(
        prerestorer=prerestorer,
        codec=codec.clone(),
        denoiser=denoiser.clone(),
        task=task_hq.clone(),
        task_hq=task_hq,
        sched=make_schedule(cfg.train.T),
        options=options or dataclasses.replace(cfg.pipeline),
        freeze_decoder=cfg.networks.freeze_decoder,
        seed=cfg.seed,
    )


@dataclass
class Pretrained:
    corpus: ToyCorpus
    task_hq: TaskNet
    prerestorer: PreRestorer
    codec: LatentCodec
    prior: ConditionalDenoiser
    fresh: ConditionalDenoiser
    logs: dict = field(default_factory=dict)


def run_pretraining(cfg: ExperimentConfig, timings: dict | None = None, with_prior: bool = True) -> Pretrained:
    cfg = cfg.resolved()
    with stage("synth", timings):
        corpus = make_corpus(cfg)
    logs = {}
    with stage("pretrain-task", timings):
        task_hq, logs["pretrain_task"] = pretrain_hq_tasknet(corpus, cfg.pretrain, cfg.networks.task_widths)
    with stage("pretrain-restorer", timings):
        prerestorer, logs["pretrain_restorer"] = pretrain_prerestorer(corpus, cfg.pretrain, cfg.networks.restorer_width)
    with stage("pretrain-codec", timings):
        n = cfg.networks
        codec, logs["pretrain_codec"] = pretrain_codec(corpus, cfg.pretrain, n.codec, n.latent_channels, n.codec_width)
    fresh = new_denoiser(cfg, codec)
    prior = fresh.clone()
    if with_prior:
        with stage("pretrain-prior", timings):
            state = make_state(cfg, task_hq, prerestorer, codec, prior)
            state.denoiser = prior  # trained in place
            logs["pretrain_prior"] = pretrain_prior(corpus, state, cfg.pretrain)
    return Pretrained(corpus, task_hq, prerestorer, codec, prior, fresh, logs)


# ------------------------------------------------------------- evaluation


def _restore_fn(state: TrainState, n: int, t_p: int, chunk: int):
    plan = state.inference_plan(t_p, n)
    return lambda lq, rng: restore_pipeline(lq, plan, state, rng, chunk=chunk)


def _report_row(method: str, n, rep: EvalReport) -> dict:
    return {
        "method": method,
        "n": "" if n is None else n,
        "accuracy": f"{rep.accuracy:.6f}",
        "psnr_db": "inf" if math.isinf(rep.psnr_db) else f"{rep.psnr_db:.4f}",
        "f_d": f"{rep.f_d:.6f}",
        "n_samples": rep.n_samples,
        "run_accuracies": " ".join(f"{a:.6f}" for a in rep.run_accuracies),
    }


def evaluate_static(images, hq, labels, H: TaskNet, H_hq: TaskNet) -> EvalReport:
    """Deterministic inputs: every inference run is identical."""
    acc = accuracy(images, labels, H)
    return EvalReport(acc, psnr(images, hq), feature_distance(images, hq, H_hq), len(labels), (acc,))


def write_csv(path: str, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_stage_log(path: str, losses: list[float]) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def save_module(path: str, mod: Module, **meta) -> None:
    save_checkpoint(path, mod.state_dict(), meta)


def load_module(path: str, mod: Module) -> Module:
    tensors, _ = load_checkpoint(path)
    mod.load_state_dict(tensors)
    return mod


# ------------------------------------------------------------ experiment


class RunDir:
    """Paths inside one run directory."""

    def __init__(self, root: str):
        self.root = root
        self.checkpoints = os.path.join(root, "checkpoints")
        self.logs = os.path.join(root, "logs")

    def make(self) -> "RunDir":
        os.makedirs(self.checkpoints, exist_ok=True)
        os.makedirs(self.logs, exist_ok=True)
        return self

    def ckpt(self, name: str) -> str:
        return os.path.join(self.checkpoints, f"{name}.ckpt")

    def log(self, name: str) -> str:
        return os.path.join(self.logs, f"{name}.csv")

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def require(self, *names: str) -> None:
        missing = [n for n in names if not os.path.exists(self.ckpt(n))]
        if missing:
            raise StageError("load", -1, f"missing checkpoints in {self.checkpoints}: {', '.join(missing)}")


def build_networks(cfg: ExperimentConfig) -> dict:
    """Untrained networks with the configured sizes (weights come from checkpoints)."""
    n = cfg.networks
    codec = LatentCodec(n.codec, latent_channels=n.latent_channels, width=n.codec_width)
    return {
        "task_hq": TaskNet(widths=n.task_widths),
        "prerestorer": PreRestorer(width=n.restorer_width),
        "codec": codec,
        "denoiser_prior": ConditionalDenoiser(codec.latent_channels, n.denoiser_width, n.emb_dim,
                                              alpha_bar=_alpha_bar(cfg)),
    }


def load_pretrained(cfg: ExperimentConfig, run: RunDir, corpus: ToyCorpus | None = None) -> Pretrained:
    cfg = cfg.resolved()
    run.require("task_hq", "prerestorer", "codec", "denoiser_prior")
    nets = {k: load_module(run.ckpt(k), v) for k, v in build_networks(cfg).items()}
    corpus = corpus if corpus is not None else make_corpus(cfg)
    return Pretrained(corpus, nets["task_hq"], nets["prerestorer"], nets["codec"], nets["denoiser_prior"],
                      new_denoiser(cfg, nets["codec"]))


def stage_pretrain_task(cfg: ExperimentConfig, run: RunDir, timings: dict | None = None) -> TaskNet:
    cfg = cfg.resolved()
    with stage("synth", timings):
        corpus = make_corpus(cfg)
    with stage("pretrain-task", timings):
        net, losses = pretrain_hq_tasknet(corpus, cfg.pretrain, cfg.networks.task_widths)
    save_module(run.ckpt("task_hq"), net)
    _write_stage_log(run.log("pretrain_task"), losses)
    return net


def stage_pretrain_restorer(cfg: ExperimentConfig, run: RunDir, timings: dict | None = None):
    """Pixel restorer, latent codec and (optionally) the denoiser prior."""
    cfg = cfg.resolved()
    n = cfg.networks
    with stage("synth", timings):
        corpus = make_corpus(cfg)
    with stage("pretrain-restorer", timings):
        prerestorer, losses = pretrain_prerestorer(corpus, cfg.pretrain, n.restorer_width)
    _write_stage_log(run.log("pretrain_restorer"), losses)
    with stage("pretrain-codec", timings):
        codec, losses = pretrain_codec(corpus, cfg.pretrain, n.codec, n.latent_channels, n.codec_width)
    _write_stage_log(run.log("pretrain_codec"), losses)
    prior = new_denoiser(cfg, codec)
    if cfg.pretrain.prior_iters > 0:
        with stage("pretrain-prior", timings):
            # the task nets play no part in the noise-prediction warm-up
            state = make_state(cfg, TaskNet(widths=n.task_widths), prerestorer, codec, prior)
            state.denoiser = prior
            _write_stage_log(run.log("pretrain_prior"), pretrain_prior(corpus, state, cfg.pretrain))
    save_module(run.ckpt("prerestorer"), prerestorer)
    save_module(run.ckpt("codec"), codec)
    save_module(run.ckpt("denoiser_prior"), prior)
    return prerestorer, codec, prior


def _edtr_names(n: int) -> dict:
    return {"denoiser": f"edtr_n{n}_denoiser", "task": f"edtr_n{n}_task", "codec": f"edtr_n{n}_codec"}


def stage_train(cfg: ExperimentConfig, run: RunDir, n_values=None, timings: dict | None = None,
                resume: bool = False, pre: Pretrained | None = None) -> dict:
    """Joint training for each n; with ``resume`` continues from the trainer checkpoint."""
    cfg = cfg.resolved()
    pre = pre or load_pretrained(cfg, run)
    states = {}
    for n in n_values or cfg.eval.n_values:
        tc = dataclasses.replace(cfg.train, n=n)
        denoiser = pre.prior if cfg.pretrain.prior_iters > 0 else pre.fresh
        state = make_state(cfg, pre.task_hq, pre.prerestorer, pre.codec, denoiser)
        trainer = JointTrainer(tc, pre.corpus, state)
        state_path = run.ckpt(f"edtr_n{n}_trainer")
        if resume and os.path.exists(state_path):
            load_state(state_path, trainer)
        log_path = run.log(f"joint_n{n}")
        with stage(f"train-edtr-{n}", timings), LossLog(log_path, append=state.iteration > 0) as logger:
            for rep in trainer.run(on_report=logger, checkpoint_path=state_path):
                if rep.iteration % 50 == 0:
                    log.info("joint n=%d it=%d hlf=%.4f task=%.4f fm=%.4f", n, rep.iteration, rep.hlf,
                             rep.task, rep.fm)
        save_state(state_path, trainer)
        names = _edtr_names(n)
        save_module(run.ckpt(names["denoiser"]), state.denoiser, iteration=state.iteration)
        save_module(run.ckpt(names["task"]), state.task, iteration=state.iteration)
        save_module(run.ckpt(names["codec"]), state.codec, iteration=state.iteration)
        states[n] = state
    return states


def load_edtr(cfg: ExperimentConfig, run: RunDir, pre: Pretrained, n: int) -> TrainState:
    names = _edtr_names(n)
    run.require(*names.values())
    state = make_state(cfg.resolved(), pre.task_hq, pre.prerestorer, pre.codec, pre.fresh)
    load_module(run.ckpt(names["denoiser"]), state.denoiser)
    load_module(run.ckpt(names["task"]), state.task)
    load_module(run.ckpt(names["codec"]), state.codec)
    return state


def stage_baselines(cfg: ExperimentConfig, run: RunDir, pre: Pretrained, timings: dict | None = None):
    """Task nets for the no-restoration and pre-restorer-only rows; cached as checkpoints."""
    cfg = cfg.resolved()
    nets = {}
    for name, restorer, offset in (("baseline_lq", None, 0), ("baseline_prerestored", pre.prerestorer, 1)):
        path = run.ckpt(name)
        if os.path.exists(path):
            nets[name] = load_module(path, pre.task_hq.clone())
            continue
        with stage(name.replace("_", "-"), timings):
            net, losses = finetune_baseline(pre.task_hq, pre.corpus, cfg.pretrain, restorer=restorer,
                                            stream_offset=offset)
        save_module(path, net)
        _write_stage_log(run.log(name), losses)
        nets[name] = net
    return nets["baseline_lq"], nets["baseline_prerestored"]


def stage_eval(cfg: ExperimentConfig, run: RunDir, timings: dict | None = None, pre: Pretrained | None = None,
               states: dict | None = None) -> list[dict]:
    cfg = cfg.resolved()
    pre = pre or load_pretrained(cfg, run)
    states = states or {n: load_edtr(cfg, run, pre, n) for n in cfg.eval.n_values}
    h_lq, h_pre = stage_baselines(cfg, run, pre, timings)
    corpus = pre.corpus
    rows = []
    with stage("eval", timings):
        lq = eval_set(cfg, corpus)
        hq, labels = corpus.val_images, corpus.val_labels
        pre_img = prerestore_only(lq, make_state(cfg, pre.task_hq, pre.prerestorer, pre.codec, pre.fresh))
        rows.append(_report_row("oracle", None, evaluate_static(hq, hq, labels, pre.task_hq, pre.task_hq)))
        rows.append(_report_row("no-restoration", None, evaluate_static(lq, hq, labels, h_lq, pre.task_hq)))
        rows.append(_report_row("pre-restorer", None, evaluate_static(pre_img, hq, labels, h_pre, pre.task_hq)))
        first_restored = None
        for n, state in states.items():
            fn = _restore_fn(state, n, cfg.train.t_p, cfg.eval.chunk)
            rep = evaluate(fn, lq, hq, labels, state.task, pre.task_hq, base_seed=cfg.seed, runs=cfg.eval.runs)
            rows.append(_report_row("edtr", n, rep))
            if first_restored is None:
                first_restored = fn(lq[:8], np.random.default_rng([cfg.seed, 1000]))
    write_csv(run.path("summary.csv"), SUMMARY_FIELDS, rows)
    with stage("artifacts", timings):
        k = min(8, len(lq))
        grid_rows = [list(lq[:k]), list(pre_img[:k])]
        if first_restored is not None:
            grid_rows.append(list(first_restored[:k]))
        grid_rows.append(list(hq[:k]))
        save_png(run.path("samples.png"), image_grid(grid_rows))
        for n in states:
            if os.path.exists(run.log(f"joint_n{n}")):
                _plot_joint(run.log(f"joint_n{n}"), run.path(f"losses_n{n}.png"))
    return rows


def _write_timings(run: RunDir, timings: dict) -> None:
    with open(run.path("timings.json"), "w") as fh:
        json.dump(timings, fh, indent=1)


def train_edtr(cfg: ExperimentConfig, pre: Pretrained, n: int, log_path: str | None = None,
               options: PipelineOptions | None = None, train_overrides: dict | None = None,
               use_prior: bool = True) -> TrainState:
    """One joint-training run from the pretrained nets, held in memory."""
    cfg = cfg.resolved()
    tc = dataclasses.replace(cfg.train, n=n, **(train_overrides or {}))
    denoiser = pre.prior if use_prior else pre.fresh
    state = make_state(cfg, pre.task_hq, pre.prerestorer, pre.codec, denoiser, options)
    train_joint(tc, pre.corpus, state, log_path=log_path)
    return state


def run_experiment(cfg: ExperimentConfig, out_dir: str) -> list[dict]:
    """Every stage in sequence for one config; returns the summary rows."""
    cfg = cfg.resolved()
    run = RunDir(out_dir).make()
    config_mod.save(cfg, run.path("config.ini"))
    timings: dict = {}
    stage_pretrain_task(cfg, run, timings)
    stage_pretrain_restorer(cfg, run, timings)
    pre = load_pretrained(cfg, run)
    with open(run.path("corpus.sha256"), "w") as fh:
        fh.write(pre.corpus.digest() + "\n")
    states = stage_train(cfg, run, timings=timings, pre=pre)
    rows = stage_eval(cfg, run, timings, pre=pre, states=states)
    _write_timings(run, timings)
    return rows


def _plot_joint(csv_path: str, png_path: str) -> None:
    rows = read_csv(csv_path)
    if not rows:
        return
    series = {k: [float(r[k]) for r in rows] for k in ("hlf", "task", "fm")}
    line_chart(png_path, series, title="joint training losses")


# -------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationCell:
    name: str
    sd_prior: bool = True
    hlf: bool = True
    fm: bool = True
    pre_restoration: bool = True
    partial_diffusion: bool = True
    n: int = 1


def ablation_grid(step_sweep=(1, 4, 30, 50)) -> list[AblationCell]:
    """Component toggles, then the step-count sweep with every component on."""
    cells = [
        AblationCell("exp1", hlf=False, pre_restoration=False, partial_diffusion=False, n=50),
        AblationCell("exp2", pre_restoration=False, partial_diffusion=False, n=50),
        AblationCell("exp3", pre_restoration=False, partial_diffusion=False, n=1),
        AblationCell("exp4", pre_restoration=False, n=1),
        AblationCell("exp5", hlf=False),
        AblationCell("exp6", fm=False),
        AblationCell("exp7", sd_prior=False),
        AblationCell("full"),
    ]
    cells += [AblationCell(f"steps{n}", n=n) for n in step_sweep]
    return cells


def run_ablation(cfg: ExperimentConfig, out_dir: str, cells: list[AblationCell] | None = None) -> list[dict]:
    cfg = cfg.resolved()
    os.makedirs(out_dir, exist_ok=True)
    config_mod.save(cfg, os.path.join(out_dir, "config.ini"))
    logs = os.path.join(out_dir, "logs")
    os.makedirs(logs, exist_ok=True)
    cells = cells if cells is not None else ablation_grid(cfg.ablation.step_sweep)
    timings: dict = {}
    pre = run_pretraining(cfg, timings, with_prior=any(c.sd_prior for c in cells))
    lq = eval_set(cfg, pre.corpus)
    hq, labels = pre.corpus.val_images, pre.corpus.val_labels
    done: dict = {}
    rows = []
    for cell in cells:
        key = dataclasses.replace(cell, name="")
        if key in done:
            rep = done[key]
        else:
            options = dataclasses.replace(cfg.pipeline, use_prerestorer=cell.pre_restoration,
                                          partial_diffusion=cell.partial_diffusion)
            overrides = {"N": cfg.ablation.N, "restorer_objective": "hlf" if cell.hlf else "eps",
                         "alpha": cfg.train.alpha if cell.fm else 0.0}
            with stage(f"ablate-{cell.name}", timings):
                state = train_edtr(cfg, pre, cell.n, log_path=os.path.join(logs, f"{cell.name}.csv"),
                                   options=options, train_overrides=overrides, use_prior=cell.sd_prior)
                fn = _restore_fn(state, cell.n, cfg.train.t_p, cfg.eval.chunk)
                rep = evaluate(fn, lq, hq, labels, state.task, pre.task_hq, base_seed=cfg.seed, runs=cfg.eval.runs)
            done[key] = rep
        row = {f: getattr(cell, f) for f in ("sd_prior", "hlf", "fm", "pre_restoration", "partial_diffusion", "n")}
        row = {k: (int(v) if isinstance(v, bool) else v) for k, v in row.items()}
        row.update(cell=cell.name, accuracy=f"{rep.accuracy:.6f}", psnr_db=f"{rep.psnr_db:.4f}", f_d=f"{rep.f_d:.6f}")
        rows.append(row)
    write_csv(os.path.join(out_dir, "ablation.csv"), ABLATION_FIELDS, rows)
    sweep = [r for r in rows if r["cell"].startswith("steps")]
    if sweep:
        short = max(float(r["accuracy"]) for r in sweep if int(r["n"]) <= 4)
        long_ = [float(r["accuracy"]) for r in sweep if int(r["n"]) > 4]
        with open(os.path.join(out_dir, "step_direction.txt"), "w") as fh:
            verdict = "n/a" if not long_ else ("holds" if short >= max(long_) else "does not hold")
            fh.write(f"short-step >= long-step accuracy: {verdict}\n")
    with open(os.path.join(out_dir, "timings.json"), "w") as fh:
        json.dump(timings, fh, indent=1)
    return rows
