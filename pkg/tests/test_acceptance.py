"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the terminal
summary. Criterion 8 trains the toy experiment for three seeds and takes
most of the suite's runtime.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

from taskrestore.autodiff import Tensor, gradcheck, load_checkpoint, ops, save_checkpoint
from taskrestore.config import ExperimentConfig, from_text, load
from taskrestore.degradation import MIXTURE_B_RANGES, DegradationRecipe, degrade, sample_recipe
from taskrestore.diffusion import OracleDenoiser, forward_diffuse, make_plan, make_schedule, one_step_denoise
from taskrestore.experiment import ablation_grid, read_csv, run_ablation, run_experiment
from taskrestore.jpeg import jpeg_like
from taskrestore.metrics import psnr
from taskrestore.networks import TaskNet
from taskrestore.pipeline import pre_restore
from taskrestore.training import JointTrainer, TrainConfig, fm_loss, hlf_loss, sample_batch, task_loss
from taskrestore.wavelet import recombine, split

from helpers import TINY_RUN, tiny_corpus, tiny_state

SCHED = make_schedule()


# ----------------------------------------------------------------------- 1


def test_c01_diffusion_round_trip(criterion):
    r = np.random.default_rng(1)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for dtype in worst:
        for _ in range(100):
            t = int(r.integers(1, SCHED.T + 1))
            z0 = r.standard_normal((2, 3, 8, 8)).astype(dtype)
            eps = r.standard_normal(z0.shape).astype(dtype)
            out = one_step_denoise(forward_diffuse(z0, t, eps, SCHED), t, None, OracleDenoiser(SCHED, z0=z0), SCHED)
            worst[dtype] = max(worst[dtype], float(np.max(np.abs(out - z0))))
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-10
    criterion(1, ok, f"max err 32-bit {worst[np.float32]:.2e}, 64-bit {worst[np.float64]:.2e}")
    assert ok


# ----------------------------------------------------------------------- 2


def test_c02_timestep_plan(criterion):
    exact = make_plan(200, 4).steps == (200, 150, 100, 50)
    r = np.random.default_rng(2)
    bad = 0
    for _ in range(1000):
        t_p = int(r.integers(1, 1001))
        n = int(r.integers(1, t_p + 1))
        s = make_plan(t_p, n, 1000).steps
        bad += not (len(s) == n and all(a > b for a, b in zip(s, s[1:])))
    ok = exact and bad == 0
    criterion(2, ok, f"plan(200,4) exact={exact}; non-decreasing plans {bad}/1000")
    assert ok


# ----------------------------------------------------------------------- 3


def test_c03_forward_statistics(criterion):
    r = np.random.default_rng(3)
    z0 = r.uniform(0.5, 1.5, size=4)
    worst_mean = worst_var = 0.0
    for t in (50, 200, 999):
        eps = r.standard_normal((10_000, 4))
        zt = forward_diffuse(np.broadcast_to(z0, eps.shape), t, eps, SCHED)
        ab = SCHED.alpha_bar[t]
        # mean error relative to the mean, floored at the noise scale where sqrt(ab) z0 ~ 0
        mean_err = np.abs(zt.mean(0) - np.sqrt(ab) * z0) / np.maximum(np.sqrt(ab) * z0, np.sqrt(1 - ab))
        var_err = np.abs(zt.var(0) - (1 - ab)) / (1 - ab)
        worst_mean, worst_var = max(worst_mean, mean_err.max()), max(worst_var, var_err.max())
    ok = worst_mean <= 0.05 and worst_var <= 0.05
    criterion(3, ok, f"max rel mean err {worst_mean:.3f}, var err {worst_var:.3f}")
    assert ok


# ----------------------------------------------------------------------- 4


def test_c04_wavelet_identity(criterion):
    r = np.random.default_rng(4)
    recon = self_id = shift = 0.0
    for _ in range(100):
        x = r.random((3, 32, 32))
        sp = split(x, 2)
        recon = max(recon, np.max(np.abs(sp.low + sp.high - x)))
        self_id = max(self_id, np.max(np.abs(recombine(x, x) - x)))
        pre = 0.25 + 0.5 * x
        shift = max(shift, np.max(np.abs(recombine(pre + r.uniform(-0.2, 0.2), pre) - pre)))
    ok = recon <= 1e-6 and self_id <= 1e-6 and shift <= 1 / 255
    criterion(4, ok, f"recon {recon:.1e}, recombine(x,x) {self_id:.1e}, colour shift {shift:.1e}")
    assert ok


# ----------------------------------------------------------------------- 5


def _kernel_graphs(r):
    """(name, fn over leaves, leaf shapes) for every differentiable kernel."""
    proj = {}

    def P(shape):
        return Tensor(proj.setdefault(shape, r.standard_normal(shape)))

    def dot(out):
        return ops.sum_all(ops.mul(out, P(out.shape)))

    labels = np.array([2, 0, 1])
    return [
        ("conv2d", lambda x, w, b: dot(ops.conv2d(x, w, b)), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
        ("linear", lambda x, w, b: dot(ops.linear(x, w, b)), [(3, 5), (2, 5), (2,)]),
        ("relu", lambda x: dot(ops.relu(x)), [(4, 5)]),
        ("silu", lambda x: dot(ops.silu(x)), [(4, 5)]),
        ("avgpool2d", lambda x: dot(ops.avgpool2d(x)), [(1, 2, 4, 4)]),
        ("global_avgpool", lambda x: dot(ops.global_avgpool(x)), [(2, 3, 3, 3)]),
        ("global_maxpool", lambda x: dot(ops.global_maxpool(x)), [(2, 3, 3, 3)]),
        ("upsample_nearest", lambda x: dot(ops.upsample_nearest(x)), [(1, 2, 3, 3)]),
        ("add", lambda a, b: dot(ops.add(a, b)), [(3, 4), (3, 4)]),
        ("sub", lambda a, b: dot(ops.sub(a, b)), [(3, 4), (3, 4)]),
        ("mul", lambda a, b: dot(ops.mul(a, b)), [(3, 4), (3, 4)]),
        ("mul_scalar", lambda a: dot(ops.mul_scalar(a, 2.5)), [(3, 4)]),
        ("add_scalar", lambda a: dot(ops.add_scalar(a, 2.5)), [(3, 4)]),
        ("clamp", lambda a: dot(ops.clamp(a, -0.7, 0.7)), [(3, 4)]),
        ("reshape", lambda a: dot(ops.reshape(a, (4, 3))), [(3, 4)]),
        ("concat_channels", lambda a, b: dot(ops.concat_channels(a, b)), [(1, 2, 3, 3), (1, 1, 3, 3)]),
        ("take_rows", lambda a: dot(ops.take_rows(a, 1, 3)), [(4, 3)]),
        ("add_channelwise", lambda x, b: dot(ops.add_channelwise(x, b)), [(2, 3, 2, 2), (2, 3)]),
        ("mean", lambda a: ops.mul_scalar(ops.mean(ops.mul(a, a)), 3.0), [(3, 4)]),
        ("group_norm", lambda x, g, b: dot(ops.group_norm(x, g, b, groups=2)), [(2, 4, 3, 3), (4,), (4,)]),
        ("softmax", lambda x: dot(ops.softmax(x)), [(3, 4)]),
        ("log_softmax", lambda x: dot(ops.log_softmax(x)), [(3, 4)]),
        ("cross_entropy", lambda x: ops.cross_entropy(x, labels), [(3, 4)]),
        ("l1", lambda a, b: ops.l1(a, b), [(3, 4), (3, 4)]),
        ("mse", lambda a, b: ops.mse(a, b), [(3, 4), (3, 4)]),
    ]


def _net64(seed):
    net = TaskNet(widths=(4, 4), seed=seed)
    for p in net.named_parameters().values():
        p.data = p.data.astype(np.float64)
    return net


def test_c05_gradients(criterion):
    r = np.random.default_rng(5)
    worst, failed = 0.0, []
    for name, fn, shapes in _kernel_graphs(r):
        leaves = [Tensor(r.standard_normal(s), requires_grad=True) for s in shapes]
        rep = gradcheck(lambda: fn(*leaves), leaves)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failed.append(name)

    H, H_hq = _net64(1), _net64(2)
    hq = 0.2 + 0.6 * r.random((2, 3, 8, 8))
    restored = 0.2 + 0.6 * r.random((2, 3, 8, 8))
    labels = np.array([0, 3])
    x = Tensor(restored.copy(), requires_grad=True)
    h_params = list(H.named_parameters().values())
    for p in h_params:
        p.requires_grad = True
    for name, fn, leaves in (
        ("hlf", lambda: hlf_loss(x, hq, H, H_hq), [x]),
        ("task", lambda: task_loss(restored, hq, labels, H), h_params),
        ("fm", lambda: fm_loss(restored, hq, H, H_hq), h_params),
    ):
        rep = gradcheck(fn, leaves)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failed.append(name)
    ok = not failed
    criterion(5, ok, f"max rel err {worst:.2e}" + (f"; failed {failed}" if failed else ""))
    assert ok


# ----------------------------------------------------------------------- 6


def test_c06_alternation_isolation(criterion):
    corpus = tiny_corpus()
    state = tiny_state(codec="tiny_ae")
    cfg = TrainConfig(N=50, batch=4, lr_edtr=1e-3, lr_task=1e-2)
    trainer = JointTrainer(cfg, corpus, state)
    from taskrestore.training import iteration_rng

    violations = 0
    edtr_moved = task_moved = 0
    for it in range(50):
        rng = iteration_rng(cfg.seed, it)
        hq, lq, labels, _ = sample_batch(corpus, cfg.batch, cfg.mixture, rng)
        pre, z_pre = pre_restore(state, lq)
        task_before = state.task.checksum()
        edtr_before = (state.denoiser.checksum(), state.codec.decoder.checksum())
        trainer.restorer_phase(it, hq, pre, z_pre, rng)
        edtr_mid = (state.denoiser.checksum(), state.codec.decoder.checksum())
        violations += state.task.checksum() != task_before
        edtr_moved += edtr_mid != edtr_before
        trainer.task_phase(it, hq, lq, labels, rng)
        violations += (state.denoiser.checksum(), state.codec.decoder.checksum()) != edtr_mid
        task_moved += state.task.checksum() != task_before
        state.iteration = it + 1
    ok = violations == 0 and edtr_moved == 50 and task_moved == 50
    criterion(6, ok, f"cross-phase changes {violations}; EDTR updated {edtr_moved}/50, H updated {task_moved}/50")
    assert ok


# ----------------------------------------------------------------------- 7


def test_c07_degradation(criterion):
    a = sample_recipe("A", np.random.default_rng(0))
    mix_a = (a.blur_sigma, a.scale, a.noise_sigma, a.jpeg_quality) == (0.0, 8.0, 0.0, 75)
    rng = np.random.default_rng(7)
    recs = [sample_recipe("B", rng) for _ in range(10_000)]
    in_range = all(
        lo <= getattr(r, k) <= hi for r in recs for k, (lo, hi) in MIXTURE_B_RANGES.items()
    )
    flat = np.full((3, 64, 64), 0.5, np.float32)
    std = float((degrade(flat, DegradationRecipe(0.0, 1.0, 10.0, 100, seed=3)) - flat).std())
    noise_ok = abs(std - 10 / 255) <= 0.15 * 10 / 255
    from taskrestore.data import synthesize_corpus

    img = synthesize_corpus(7, 4, 4, 64).val_images[0]
    scores = [psnr(img, jpeg_like(img, q)) for q in (10, 25, 50, 75, 90, 100)]
    monotone = all(x < y for x, y in zip(scores, scores[1:]))
    ok = mix_a and in_range and noise_ok and monotone
    criterion(7, ok, f"mixture A {mix_a}; B in range {in_range}; noise std {std * 255:.2f}/255; "
                     f"PSNR by quality {[round(s, 1) for s in scores]}")
    assert ok


# ----------------------------------------------------------------------- 8


ACCEPTANCE_INI = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "acceptance.ini")


def _acceptance_config() -> ExperimentConfig:
    return load(os.environ.get("TASKRESTORE_ACCEPTANCE_CONFIG", ACCEPTANCE_INI))


@pytest.mark.slow
def test_c08_ordering_experiment(criterion, tmp_path_factory):
    from taskrestore.cli import ordering_holds

    base = _acceptance_config()
    out = os.environ.get("TASKRESTORE_OUT") or str(tmp_path_factory.mktemp("c08"))
    t0 = time.perf_counter()
    verdicts, details, per_seed = [], [], []
    for seed in (0, 1, 2):
        cfg = dataclasses.replace(base, seed=seed)
        rows = run_experiment(cfg, os.path.join(out, f"c08-{cfg.name}-seed{seed}"))
        ok, detail = ordering_holds(rows, n=1, margin=0.03)
        verdicts.append(ok)
        details.append(f"seed {seed}: {detail}")
        per_seed.append({(r["method"], str(r["n"])): float(r["accuracy"]) for r in rows})
    minutes = (time.perf_counter() - t0) / 60
    mean = {k: np.mean([s[k] for s in per_seed]) for k in per_seed[0]}
    for line in details:
        print(line)
    ok = sum(verdicts) >= 2 and minutes <= 120
    criterion(8, ok, f"ordering in {sum(verdicts)}/3 seeds; mean acc oracle={mean[('oracle', '')]:.3f} "
                     f"edtr1={mean[('edtr', '1')]:.3f} pre={mean[('pre-restorer', '')]:.3f} "
                     f"lq={mean[('no-restoration', '')]:.3f}; {minutes:.1f} min")
    assert ok, "\n".join(details)


# ----------------------------------------------------------------------- 9


def test_c09_ablation_harness(criterion, tmp_path):
    cfg = from_text(TINY_RUN.format(seed=0))
    rows = run_ablation(cfg, str(tmp_path))
    csv_rows = read_csv(str(tmp_path / "ablation.csv"))
    grid = ablation_grid(cfg.ablation.step_sweep)
    names_ok = [r["cell"] for r in csv_rows] == [c.name for c in grid]
    toggles = {(r["sd_prior"], r["hlf"], r["fm"], r["pre_restoration"], r["partial_diffusion"])
               for r in csv_rows}
    steps = {int(r["n"]) for r in csv_rows if r["cell"].startswith("steps")}
    direction = (tmp_path / "step_direction.txt").read_text().strip()
    ok = names_ok and len(rows) == len(grid) and len(toggles) >= 6 and {1, 4} <= steps
    criterion(9, ok, f"{len(csv_rows)} cells, {len(toggles)} toggle patterns, steps {sorted(steps)}; {direction}")
    assert ok


def test_c09_default_grid_covers_both_tables():
    grid = ablation_grid()
    assert {c.n for c in grid if c.name.startswith("steps")} == {1, 4, 30, 50}
    assert [c.name for c in grid[:8]] == [f"exp{k}" for k in range(1, 8)] + ["full"]


# ---------------------------------------------------------------------- 10


def test_c10_determinism_and_persistence(criterion, tmp_path):
    cfg = from_text(TINY_RUN.format(seed=3))
    run_experiment(cfg, str(tmp_path / "a"))
    run_experiment(cfg, str(tmp_path / "b"))
    same = []
    for rel in ("summary.csv", "logs/joint_n1.csv", "logs/joint_n4.csv", "logs/pretrain_task.csv",
                "logs/pretrain_restorer.csv", "logs/pretrain_prior.csv", "corpus.sha256"):
        same.append((tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes())
    r = np.random.default_rng(10)
    tensors = {"f32": r.standard_normal((3, 5)).astype(np.float32), "f64": r.standard_normal(7),
               "i64": np.arange(4, dtype=np.int64)}
    save_checkpoint(str(tmp_path / "x.ckpt"), tensors, {"k": 1})
    back, meta = load_checkpoint(str(tmp_path / "x.ckpt"))
    exact = meta == {"k": 1} and all(back[k].tobytes() == v.tobytes() and back[k].dtype == v.dtype
                                     for k, v in tensors.items())
    # every checkpoint written by the run reloads to the same bytes
    ck = tmp_path / "a" / "checkpoints"
    for f in sorted(ck.iterdir()):
        t1, m1 = load_checkpoint(str(f))
        save_checkpoint(str(tmp_path / "re.ckpt"), t1, m1)
        exact &= (tmp_path / "re.ckpt").read_bytes() == f.read_bytes()
    ok = all(same) and exact
    criterion(10, ok, f"identical artifacts {sum(same)}/{len(same)}; checkpoint round trip exact={exact}")
    assert ok
