import dataclasses

import numpy as np
import pytest

from taskrestore.autodiff import Tensor, gradcheck, ops
from taskrestore.networks import TaskNet
from taskrestore.training import (
    JointTrainer,
    LossLog,
    TrainConfig,
    TrainingError,
    fm_loss,
    hlf_loss,
    load_state,
    sample_batch,
    save_state,
    task_loss,
    train_joint,
)

from helpers import tiny_corpus, tiny_state


def as64(net):
    for p in net.named_parameters().values():
        p.data = p.data.astype(np.float64)
    return net


@pytest.fixture
def nets():
    return as64(TaskNet(widths=(4, 4), seed=1)), as64(TaskNet(widths=(4, 4), seed=2))


def images(rng, n=2, size=8):
    return 0.2 + 0.6 * rng.random((n, 3, size, size))


# ------------------------------------------------------------------ losses


def test_hlf_zero_on_hq(rng, nets):
    hq = images(rng)
    for spaces in ("both", "task", "hq"):
        assert hlf_loss(hq, hq, *nets, spaces=spaces).item() == 0.0


def test_hlf_is_mean_of_the_two_spaces(rng, nets):
    x, hq = images(rng), images(rng)
    both = hlf_loss(x, hq, *nets).item()
    parts = hlf_loss(x, hq, *nets, spaces="task").item() + hlf_loss(x, hq, *nets, spaces="hq").item()
    assert both == pytest.approx(parts / 2)


def test_hlf_rejects_feature_mismatch(rng):
    with pytest.raises(ValueError, match="feature"):
        hlf_loss(images(rng), images(rng), TaskNet(widths=(4, 4)), TaskNet(widths=(4, 8)))


def test_task_loss_uniform_and_perfect(rng):
    class Const:
        def __init__(self, logits):
            self.value = logits

        def logits(self, x):
            return Tensor(np.repeat(self.value[None], len(x), axis=0))

    hq = images(rng, n=4)
    labels = np.zeros(4, dtype=np.int64)
    assert task_loss(hq, hq, labels, Const(np.zeros(4))).item() == pytest.approx(np.log(4))
    assert task_loss(hq, hq, labels, Const(np.array([50.0, 0, 0, 0]))).item() < 1e-12


def test_task_loss_uses_restored_first_half(rng, nets):
    H = nets[0]
    restored, hq = images(rng, n=4), images(rng, n=4)
    labels = np.array([0, 1, 2, 3])
    mix = np.concatenate([restored[:2], hq[2:]])
    expect = ops.cross_entropy(H.logits(mix), labels).item()
    assert task_loss(restored, hq, labels, H).item() == pytest.approx(expect)


def test_odd_batch_rejected(rng, nets):
    with pytest.raises(ValueError, match="even"):
        task_loss(images(rng, 3), images(rng, 3), np.zeros(3, int), nets[0])
    with pytest.raises(ValueError, match="even"):
        fm_loss(images(rng, 3), images(rng, 3), *nets)


def test_fm_zero_when_nets_and_images_agree(rng, nets):
    hq = images(rng, 4)
    assert fm_loss(hq, hq, nets[0], nets[0]).item() == 0.0


@pytest.mark.parametrize("which", ["hlf", "task", "fm"])
def test_loss_gradients(rng, nets, which):
    H, H_hq = nets
    hq = images(rng)
    labels = np.array([1, 3])
    x = Tensor(images(rng), requires_grad=True)
    if which == "hlf":
        # targets are stop-gradient constants, so only the restored input is checked
        leaves = [x]
        fn = lambda: hlf_loss(x, hq, H, H_hq)  # noqa: E731
    else:
        # the task-net losses are differentiated with respect to H
        leaves = list(H.named_parameters().values())
        restored = images(rng)
        if which == "task":
            fn = lambda: task_loss(restored, hq, labels, H)  # noqa: E731
        else:
            fn = lambda: fm_loss(restored, hq, H, H_hq)  # noqa: E731
    for p in leaves:
        p.requires_grad = True
    rep = gradcheck(fn, leaves)
    assert rep.passed, str(rep)


# ------------------------------------------------------------------ config


@pytest.mark.parametrize("kw", [dict(batch=3), dict(n=201), dict(t_p=1001), dict(hlf_spaces="x"),
                                dict(restorer_objective="x")])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_sample_batch_is_seeded():
    c = tiny_corpus()
    a = sample_batch(c, 4, "B", np.random.default_rng(0))
    b = sample_batch(c, 4, "B", np.random.default_rng(0))
    for x, y in zip(a[:3], b[:3]):
        np.testing.assert_array_equal(x, y)
    assert a[0].shape == a[1].shape == (4, 3, 16, 16)


# ------------------------------------------------------------------- loop


def small_config(**kw):
    base = dict(N=6, batch=4, lr_edtr=1e-3, lr_task=1e-2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_phases_touch_disjoint_weights():
    corpus = tiny_corpus()
    state = tiny_state(codec="tiny_ae")
    trainer = JointTrainer(small_config(), corpus, state)
    frozen_mods = (state.prerestorer, state.task_hq)
    before = [m.checksum() for m in frozen_mods]
    encoder = state.codec.encoder.checksum()
    for _ in range(3):
        task_sum = state.task.checksum()
        edtr_sum = [state.denoiser.checksum(), state.codec.decoder.checksum()]
        rng = np.random.default_rng(state.iteration)
        hq, lq, labels, _ = sample_batch(corpus, 4, "B", rng)
        from taskrestore.pipeline import pre_restore

        pre, z_pre = pre_restore(state, lq)
        trainer.restorer_phase(state.iteration, hq, pre, z_pre, rng)
        assert state.task.checksum() == task_sum
        after_edtr = [state.denoiser.checksum(), state.codec.decoder.checksum()]
        assert after_edtr[0] != edtr_sum[0] and after_edtr[1] != edtr_sum[1]
        trainer.task_phase(state.iteration, hq, lq, labels, rng)
        assert [state.denoiser.checksum(), state.codec.decoder.checksum()] == after_edtr
        assert state.task.checksum() != task_sum
        state.iteration += 1
    assert [m.checksum() for m in frozen_mods] == before
    assert state.codec.encoder.checksum() == encoder


def test_frozen_decoder_stays_fixed():
    state = tiny_state(codec="tiny_ae", freeze_decoder=True)
    dec = state.codec.decoder.checksum()
    train_joint(small_config(N=2), tiny_corpus(), state)
    assert state.codec.decoder.checksum() == dec


def test_alpha_zero_makes_task_updates_independent_of_hq_net():
    corpus = tiny_corpus()
    a, b = tiny_state(), tiny_state()
    b.task_hq = TaskNet(widths=(4, 8), seed=99)
    cfg = small_config(N=3, alpha=0.0, train_restorer=False)
    train_joint(cfg, corpus, a)
    train_joint(cfg, corpus, b)
    assert a.task.checksum() == b.task.checksum()
    # with alpha > 0 the HQ net does steer the task net
    a, b = tiny_state(), tiny_state()
    b.task_hq = TaskNet(widths=(4, 8), seed=99)
    cfg = dataclasses.replace(cfg, alpha=1.0)
    train_joint(cfg, corpus, a)
    train_joint(cfg, corpus, b)
    assert a.task.checksum() != b.task.checksum()


def test_bit_identical_loss_streams(tmp_path):
    corpus = tiny_corpus()
    logs = []
    for k in range(2):
        path = tmp_path / f"log{k}.csv"
        train_joint(small_config(), corpus, tiny_state(), str(path))
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == b"iteration,hlf,task,fm,lr_edtr,lr_task"


def test_resume_is_bit_exact(tmp_path):
    corpus = tiny_corpus()
    cfg = small_config(N=6)
    full = train_joint(cfg, corpus, tiny_state(codec="tiny_ae"))
    state = tiny_state(codec="tiny_ae")
    trainer = JointTrainer(cfg, corpus, state)
    first = list(trainer.run(until=3))
    ckpt = tmp_path / "s.ckpt"
    save_state(str(ckpt), trainer)
    fresh = JointTrainer(cfg, corpus, tiny_state(codec="tiny_ae", seed=5))
    load_state(str(ckpt), fresh)
    rest = list(fresh.run())
    assert [r.row() for r in first + rest] == [r.row() for r in full]


def test_cosine_schedule_in_reports():
    reps = train_joint(small_config(N=4, lr_edtr=1e-3, lr_task=1e-2), tiny_corpus(), tiny_state())
    assert reps[0].lr_edtr == 1e-3 and reps[0].lr_task == 1e-2
    assert reps[-1].lr_task < reps[0].lr_task


def test_nan_aborts_with_iteration():
    state = tiny_state()
    for p in state.denoiser.named_parameters().values():
        p.data[...] = np.nan
    with pytest.raises(TrainingError) as err:
        train_joint(small_config(N=3), tiny_corpus(), state)
    assert err.value.iteration == 0
    assert "iteration 0" in str(err.value)


def test_loss_log_append(tmp_path):
    from taskrestore.training import LossReport

    path = str(tmp_path / "l.csv")
    with LossLog(path) as log:
        log(LossReport(0, 1.0, 2.0, 3.0, 5.0, 0.1, 0.2))
    with LossLog(path, append=True) as log:
        log(LossReport(1, 1.0, 2.0, 3.0, 5.0, 0.1, 0.2))
    lines = open(path).read().splitlines()
    assert len(lines) == 3 and lines[2].startswith("1,")


def test_eps_objective_runs():
    reps = train_joint(small_config(N=2, restorer_objective="eps"), tiny_corpus(), tiny_state())
    assert len(reps) == 2
