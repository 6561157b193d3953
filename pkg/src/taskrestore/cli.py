"""Command-line entry point.

Every subcommand that trains or evaluates reads an experiment config
(``--config``, defaults otherwise) and works inside one run directory,
``$TASKRESTORE_OUT/<name>-seed<seed>`` unless ``--run-dir`` is given.
Exit status: 0 on success, 2 on a config error, 3 when a stage or an
invariant check fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import logging
import math
import os
import sys

import numpy as np

from . import config as config_mod
from .autodiff import CheckpointError, ShapeError
from .config import ConfigError, ExperimentConfig
from .data import CLASS_NAMES
from .degradation import degrade, sample_recipe
from .experiment import (
    RunDir,
    make_corpus,
    output_root,
    read_csv,
    run_ablation,
    run_experiment,
    stage_eval,
    stage_pretrain_restorer,
    stage_pretrain_task,
    stage_train,
    write_csv,
)
from .imageio import load_png, save_png
from .pretrain import StageError
from .training import TrainConfig, TrainingError

log = logging.getLogger("taskrestore")

EXIT_CONFIG = 2
EXIT_FAILURE = 3


class InvariantError(RuntimeError):
    pass


# ------------------------------------------------------------------ config


def _load_config(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mixture is not None:
        cfg.mixture = args.mixture
    train_over = {k: getattr(args, k) for k in ("N", "lr_edtr", "lr_task", "alpha", "batch", "t_p")
                  if getattr(args, k, None) is not None}
    if train_over:
        try:
            cfg.train = dataclasses.replace(cfg.train, **train_over)
        except ValueError as err:
            raise ConfigError(str(err)) from None
    if getattr(args, "n", None):
        cfg.eval = dataclasses.replace(cfg.eval, n_values=tuple(args.n))
    return cfg.resolved()


def _run_dir(args, cfg: ExperimentConfig) -> RunDir:
    root = args.run_dir or os.path.join(output_root(), f"{cfg.name}-seed{cfg.seed}")
    run = RunDir(root).make()
    config_mod.save(cfg, run.path("config.ini"))
    return run


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    corpus = make_corpus(cfg)
    out = args.out or os.path.join(output_root(), "corpus", f"seed{cfg.seed}")
    rows = []
    for split, images, labels in (("train", corpus.train_images, corpus.train_labels),
                                  ("val", corpus.val_images, corpus.val_labels)):
        os.makedirs(os.path.join(out, split), exist_ok=True)
        for i, (img, lab) in enumerate(zip(images, labels)):
            name = f"{split}/{i:05d}_{CLASS_NAMES[lab]}.png"
            save_png(os.path.join(out, name), img)
            rows.append({"file": name, "split": split, "label": int(lab)})
    write_csv(os.path.join(out, "labels.csv"), ("file", "split", "label"), rows)
    with open(os.path.join(out, "corpus.sha256"), "w") as fh:
        fh.write(corpus.digest() + "\n")
    print(f"wrote {len(rows)} images to {out}")
    return 0


def cmd_degrade(args) -> int:
    files = sorted(glob.glob(os.path.join(args.input, "**", "*.png"), recursive=True))
    if not files:
        raise InvariantError(f"no PNG files under {args.input}")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    with open(os.path.join(args.out, "manifest.tsv"), "w") as fh:
        for path in files:
            rel = os.path.relpath(path, args.input)
            recipe = sample_recipe(args.mixture, rng)
            hq = load_png(path)
            lq = degrade(hq, recipe)
            if lq.shape != hq.shape or lq.min() < 0 or lq.max() > 1:
                raise InvariantError(f"degraded image for {rel} violates shape/range")
            dest = os.path.join(args.out, rel)
            os.makedirs(os.path.dirname(dest), exist_ok=True)
            save_png(dest, lq)
            fh.write(f"{rel}\t{recipe.to_line()}\n")
    print(f"degraded {len(files)} images into {args.out}")
    return 0


def cmd_pretrain_task(args) -> int:
    cfg = _load_config(args)
    stage_pretrain_task(cfg, _run_dir(args, cfg))
    return 0


def cmd_pretrain_restorer(args) -> int:
    cfg = _load_config(args)
    stage_pretrain_restorer(cfg, _run_dir(args, cfg))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    stage_train(cfg, _run_dir(args, cfg), resume=args.resume)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    rows = stage_eval(cfg, _run_dir(args, cfg))
    _print_rows(rows)
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    rows = run_experiment(cfg, _run_dir(args, cfg).root)
    _print_rows(rows)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.ablate_N is not None:
        cfg.ablation = dataclasses.replace(cfg.ablation, N=args.ablate_N)
    run = _run_dir(args, cfg)
    rows = run_ablation(cfg, os.path.join(run.root, "ablation"))
    for r in rows:
        print(f"{r['cell']:>8}  n={r['n']:<3} acc={r['accuracy']}  f_d={r['f_d']}")
    return 0


def _print_rows(rows) -> None:
    for r in rows:
        tag = r["method"] + (f"-{r['n']}" if r["n"] != "" else "")
        print(f"{tag:>16}  acc={r['accuracy']}  psnr={r['psnr_db']}  f_d={r['f_d']}")


# ------------------------------------------------------------------ report


def check_summary(rows: list[dict]) -> list[str]:
    """Invariants every summary must satisfy; returns the violations."""
    problems = []
    by = {(r["method"], r["n"]): r for r in rows}
    for need in ("oracle", "no-restoration", "pre-restorer"):
        if (need, "") not in by:
            problems.append(f"missing method {need}")
    for r in rows:
        acc, fd = float(r["accuracy"]), float(r["f_d"])
        if not 0.0 <= acc <= 1.0:
            problems.append(f"{r['method']}: accuracy {acc} outside [0,1]")
        if not (fd >= 0 and math.isfinite(fd)):
            problems.append(f"{r['method']}: invalid f_d {fd}")
        p = float(r["psnr_db"])
        if not p >= 0:
            problems.append(f"{r['method']}: negative PSNR {p}")
    return problems


def ordering_holds(rows: list[dict], n: int = 1, margin: float = 0.03) -> tuple[bool, str]:
    """Oracle > EDTR-n > pre-restorer > no-restoration (accuracy, EDTR by ``margin``)
    and f_d(EDTR) < f_d(pre-restorer) < f_d(LQ)."""
    by = {(r["method"], str(r["n"])): r for r in rows}
    try:
        o, e = by[("oracle", "")], by[("edtr", str(n))]
        p, q = by[("pre-restorer", "")], by[("no-restoration", "")]
    except KeyError as err:
        return False, f"missing row {err}"
    acc = {k: float(v["accuracy"]) for k, v in (("o", o), ("e", e), ("p", p), ("q", q))}
    fd = {k: float(v["f_d"]) for k, v in (("e", e), ("p", p), ("q", q))}
    ok_acc = acc["o"] > acc["e"] > acc["p"] > acc["q"] and acc["e"] - acc["p"] >= margin
    ok_fd = fd["e"] < fd["p"] < fd["q"]
    detail = (f"acc oracle={acc['o']:.4f} edtr={acc['e']:.4f} pre={acc['p']:.4f} lq={acc['q']:.4f}; "
              f"f_d edtr={fd['e']:.4f} pre={fd['p']:.4f} lq={fd['q']:.4f}")
    return ok_acc and ok_fd, detail


def cmd_report(args) -> int:
    dirs = args.run_dirs or sorted(glob.glob(os.path.join(output_root(), "*")))
    summaries = [(d, os.path.join(d, "summary.csv")) for d in dirs]
    summaries = [(d, p) for d, p in summaries if os.path.exists(p)]
    if not summaries:
        raise InvariantError("no summary.csv found")
    lines = ["| run | method | n | accuracy | PSNR (dB) | f_d |", "|---|---|---|---|---|---|"]
    problems = []
    verdicts = []
    for d, path in summaries:
        rows = read_csv(path)
        problems += [f"{d}: {p}" for p in check_summary(rows)]
        for r in rows:
            lines.append(f"| {os.path.basename(d)} | {r['method']} | {r['n']} | {float(r['accuracy']):.4f} "
                         f"| {r['psnr_db']} | {float(r['f_d']):.4f} |")
        ok, detail = ordering_holds(rows, args.ordering_n)
        verdicts.append(ok)
        lines.append("")
        lines.append(f"ordering ({os.path.basename(d)}): {'holds' if ok else 'does not hold'}; {detail}")
        lines.append("")
        abl = os.path.join(d, "ablation", "ablation.csv")
        if os.path.exists(abl):
            lines.append("| cell | prior | HLF | FM | pre-restore | partial | n | accuracy | f_d |")
            lines.append("|---|---|---|---|---|---|---|---|---|")
            for r in read_csv(abl):
                lines.append(f"| {r['cell']} | {r['sd_prior']} | {r['hlf']} | {r['fm']} | {r['pre_restoration']} "
                             f"| {r['partial_diffusion']} | {r['n']} | {float(r['accuracy']):.4f} "
                             f"| {float(r['f_d']):.4f} |")
            lines.append("")
    text = "\n".join(lines) + "\n"
    out = args.out or os.path.join(output_root(), "report.md")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w") as fh:
        fh.write(text)
    print(text)
    if problems:
        raise InvariantError("; ".join(problems))
    if args.require_ordering and sum(verdicts) < math.ceil(2 * len(verdicts) / 3):
        raise InvariantError(f"ordering holds in {sum(verdicts)} of {len(verdicts)} runs")
    return 0


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", help="experiment config file (INI); defaults when omitted")
    p.add_argument("--seed", type=int, help="override [experiment] seed")
    p.add_argument("--mixture", choices=("A", "B"), help="override [experiment] mixture")
    p.add_argument("--run-dir", help="run directory (default: $TASKRESTORE_OUT/<name>-seed<seed>)")
    if training:
        d = TrainConfig()
        p.add_argument("--N", type=int, help=f"joint-training iterations (default {d.N})")
        p.add_argument("--lr-edtr", dest="lr_edtr", type=float, help=f"EDTR learning rate (default {d.lr_edtr})")
        p.add_argument("--lr-task", dest="lr_task", type=float, help=f"task-net learning rate (default {d.lr_task})")
        p.add_argument("--alpha", type=float, help=f"FM loss weight (default {d.alpha})")
        p.add_argument("--batch", type=int, help=f"batch size, even (default {d.batch})")
        p.add_argument("--t-p", dest="t_p", type=int, help=f"partial-diffusion timestep (default {d.t_p})")
        p.add_argument("--n", type=int, action="append", help="denoising steps; repeat for several")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taskrestore", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the procedural corpus as PNGs")
    _common(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", help="degrade a directory of PNGs")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--mixture", choices=("A", "B"), default="B")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    for name, func, helptext in (
        ("pretrain-task", cmd_pretrain_task, "train the HQ task network"),
        ("pretrain-restorer", cmd_pretrain_restorer, "train the pixel restorer, codec and prior"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="joint training (needs the pretrain stages)")
    _common(p, training=True)
    p.add_argument("--resume", action="store_true", help="continue from the trainer checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="baselines and evaluation; writes summary.csv")
    _common(p, training=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="every stage in sequence")
    _common(p, training=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="component toggles and step-count sweep")
    _common(p, training=True)
    p.add_argument("--ablate-N", dest="ablate_N", type=int, help="iterations per ablation cell")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="collect summaries into report.md and check invariants")
    p.add_argument("run_dirs", nargs="*", help="run directories (default: all under $TASKRESTORE_OUT)")
    p.add_argument("--out", help="report path (default: $TASKRESTORE_OUT/report.md)")
    p.add_argument("--ordering-n", type=int, default=1)
    p.add_argument("--require-ordering", action="store_true",
                   help="fail unless the accuracy/f_d ordering holds in at least 2/3 of the runs")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, TrainingError, InvariantError, ShapeError, CheckpointError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
