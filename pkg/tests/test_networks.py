import numpy as np
import pytest

from taskrestore.autodiff import Tensor, backward, gradcheck, ops
from taskrestore.diffusion import forward_diffuse, make_schedule, one_step_denoise
from taskrestore.networks import (
    ConditionalDenoiser,
    IdentityRestorer,
    LatentCodec,
    PreRestorer,
    TaskNet,
    timestep_embedding,
)


def test_prerestorer_shape_and_range(rng):
    x = rng.random((2, 3, 16, 16)).astype(np.float32)
    out = PreRestorer(width=4, seed=0)(x)
    assert out.shape == x.shape
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_prerestorer_is_residual(rng):
    net = PreRestorer(width=4, seed=0)
    for p in net.out.named_parameters().values():
        p.data[...] = 0
    x = rng.random((1, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(net(x).data, x)


def test_identity_restorer(rng):
    x = rng.random((1, 3, 8, 8))
    np.testing.assert_array_equal(IdentityRestorer()(x).data, x)


def test_identity_codec_is_exact(rng):
    x = rng.random((2, 3, 8, 8)).astype(np.float32)
    c = LatentCodec("identity")
    np.testing.assert_array_equal(c.decode(c.encode(x)).data, x)
    assert c.decoder_params() == {}


def test_tiny_ae_shapes(rng):
    c = LatentCodec("tiny_ae", latent_channels=4, width=4, seed=0)
    x = rng.random((2, 3, 16, 16)).astype(np.float32)
    z = c.encode(x)
    assert z.shape == (2, 4, 8, 8)
    assert c.decode(z).shape == x.shape
    assert all(k.startswith("codec.decoder.") for k in c.decoder_params())


def test_unknown_codec_mode():
    with pytest.raises(ValueError):
        LatentCodec("vae")


def test_timestep_embedding():
    e = timestep_embedding(10, 8, 3)
    assert e.shape == (3, 8) and np.all(e[0] == e[2])
    assert not np.allclose(e, timestep_embedding(11, 8, 3))


def test_denoiser_shape_and_timestep_dependence(rng):
    d = ConditionalDenoiser(3, width=4, emb_dim=8, seed=0)
    z = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    a, b = d(z, 10, z).data, d(z, 500, z).data
    assert a.shape == z.shape and not np.allclose(a, b)


def test_anchored_denoiser_starts_as_condition_passthrough(rng):
    sched = make_schedule()
    d = ConditionalDenoiser(3, width=4, emb_dim=8, seed=0, alpha_bar=sched.alpha_bar)
    cond = rng.random((2, 3, 16, 16)).astype(np.float32)
    eps = rng.standard_normal(cond.shape).astype(np.float32)
    z_t = forward_diffuse(cond, 200, eps, sched)
    np.testing.assert_allclose(d(z_t, 200, cond).data, eps, atol=1e-4)
    z0 = one_step_denoise(Tensor(z_t), 200, cond, d, sched)
    np.testing.assert_allclose(z0.data, cond, atol=1e-4)


def test_anchored_denoiser_correction_is_trainable(rng):
    d = ConditionalDenoiser(3, width=4, emb_dim=8, seed=0, alpha_bar=make_schedule().alpha_bar)
    z = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    backward(ops.sum_all(d(z, 50, z)))
    assert np.abs(d.out.w.grad).sum() > 0


def test_denoiser_rejects_mismatched_condition(rng):
    d = ConditionalDenoiser(3, width=4, emb_dim=8, seed=0)
    with pytest.raises(ValueError):
        d(np.zeros((1, 3, 8, 8), np.float32), 1, np.zeros((1, 3, 4, 4), np.float32))


def test_tasknet_outputs(rng):
    net = TaskNet(widths=(4, 8), seed=0)
    f, logits = net(rng.random((5, 3, 16, 16)).astype(np.float32))
    assert f.shape == (5, net.feature_dim) and logits.shape == (5, 4)


def test_same_seed_same_weights():
    assert TaskNet(widths=(4, 8), seed=3).checksum() == TaskNet(widths=(4, 8), seed=3).checksum()
    assert TaskNet(widths=(4, 8), seed=3).checksum() != TaskNet(widths=(4, 8), seed=4).checksum()


def test_clone_is_independent():
    a = TaskNet(widths=(4, 8), seed=0)
    b = a.clone()
    assert a.checksum() == b.checksum()
    next(iter(b.named_parameters().values())).data += 1
    assert a.checksum() != b.checksum()


def _as64(module):
    for p in module.named_parameters().values():
        p.data = p.data.astype(np.float64)
    return module


@pytest.mark.parametrize("which", ["task", "restorer", "denoiser", "tiny_ae"])
def test_network_input_gradients(rng, which):
    x = Tensor(0.2 + 0.6 * rng.random((2, 3, 8, 8)), requires_grad=True)
    if which == "task":
        net = _as64(TaskNet(widths=(4, 4), seed=0))
        fn = lambda: ops.sum_all(ops.mul(net.logits(x), Tensor(rng_proj)))  # noqa: E731
        rng_proj = rng.standard_normal((2, 4))
    elif which == "restorer":
        net = _as64(PreRestorer(width=4, seed=0))
        rng_proj = rng.standard_normal((2, 3, 8, 8))
        fn = lambda: ops.sum_all(ops.mul(net(x), Tensor(rng_proj)))  # noqa: E731
    elif which == "denoiser":
        net = _as64(ConditionalDenoiser(3, width=4, emb_dim=8, seed=0))
        cond = rng.standard_normal((2, 3, 8, 8))
        rng_proj = rng.standard_normal((2, 3, 8, 8))
        fn = lambda: ops.sum_all(ops.mul(net(x, 50, cond), Tensor(rng_proj)))  # noqa: E731
    else:
        net = _as64(LatentCodec("tiny_ae", latent_channels=2, width=4, seed=0))
        rng_proj = rng.standard_normal((2, 3, 8, 8))
        fn = lambda: ops.sum_all(ops.mul(net.decode(net.encode(x)), Tensor(rng_proj)))  # noqa: E731
    rep = gradcheck(fn, [x])
    assert rep.passed, str(rep)


def test_parameter_gradients_populated(rng):
    net = TaskNet(widths=(4, 8), seed=0)
    loss = ops.cross_entropy(net.logits(rng.random((4, 3, 16, 16)).astype(np.float32)), np.array([0, 1, 2, 3]))
    backward(loss)
    for name, p in net.named_parameters().items():
        assert p.grad is not None, name
