"""Toy stand-ins for the learned components.

PreRestorer    small residual U-net trained on pixel L1
LatentCodec    identity, or a tiny conv autoencoder at half resolution
ConditionalDenoiser
               U-net predicting noise from (z_t, t, z_pre_res); the condition
               is concatenated on channels and t enters through a sinusoidal
               embedding added to hidden channels. Given the cumulative
               schedule it is anchored: the output is the noise that would
               be exact if the clean latent equalled the condition, plus a
               learned correction whose last layer starts at zero
TaskNet        conv classifier; ``features`` is the vector feeding the
               final linear layer (global max over space, which localises
               a small shape far better than a spatial mean)
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Module, Tensor, as_tensor, ops, param


class Conv(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3, gain: float = 2.0):
        std = math.sqrt(gain / (cin * k * k))
        self.w = param(rng.normal(0.0, std, (cout, cin, k, k)))
        self.b = param(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, gain: float = 2.0):
        self.w = param(rng.normal(0.0, math.sqrt(gain / fin), (fout, fin)))
        self.b = param(np.zeros(fout))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 4):
        self.groups = min(groups, channels)
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.gamma, self.beta, self.groups)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------- restorer


class PreRestorer(Module):
    """Pixel-error restorer: x + U-net residual, clipped to [0,1]."""

    def __init__(self, channels: int = 3, width: int = 16, seed=0):
        rng = _rng(seed)
        c = width
        self.width = width
        self.inp = Conv(channels, c, rng)
        self.enc1 = Conv(c, c, rng)
        self.enc2 = Conv(c, 2 * c, rng)
        self.enc3 = Conv(2 * c, 2 * c, rng)
        self.mid = Conv(2 * c, 2 * c, rng)
        self.dec2 = Conv(4 * c, 2 * c, rng)
        self.dec1 = Conv(3 * c, c, rng)
        self.out = Conv(c, channels, rng, gain=0.1)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        f1 = ops.relu(self.enc1(ops.relu(self.inp(x))))
        f2 = ops.relu(self.enc3(ops.relu(self.enc2(ops.avgpool2d(f1)))))
        f3 = ops.relu(self.mid(ops.avgpool2d(f2)))
        u2 = ops.relu(self.dec2(ops.concat_channels(ops.upsample_nearest(f3), f2)))
        u1 = ops.relu(self.dec1(ops.concat_channels(ops.upsample_nearest(u2), f1)))
        return ops.clamp(ops.add(x, self.out(u1)), 0.0, 1.0)


class IdentityRestorer(Module):
    """Used when pre-restoration is switched off."""

    def __call__(self, x) -> Tensor:
        return as_tensor(x)


# ------------------------------------------------------------------- codec


class Encoder(Module):
    def __init__(self, channels: int, latent: int, width: int, rng):
        self.c1 = Conv(channels, width, rng)
        self.c2 = Conv(width, width, rng)
        self.c3 = Conv(width, latent, rng, gain=1.0)

    def __call__(self, x):
        h = ops.relu(self.c1(x))
        h = ops.relu(self.c2(ops.avgpool2d(h)))
        return self.c3(h)


class Decoder(Module):
    def __init__(self, channels: int, latent: int, width: int, rng):
        self.c1 = Conv(latent, width, rng)
        self.c2 = Conv(width, width, rng)
        self.c3 = Conv(width, channels, rng, gain=1.0)

    def __call__(self, z):
        h = ops.relu(self.c1(z))
        h = ops.relu(self.c2(ops.upsample_nearest(h)))
        return self.c3(h)


class LatentCodec(Module):
    """mode="identity": diffusion runs in pixel space. mode="tiny_ae": 2x
    downsampling autoencoder with ``latent_channels`` channels."""

    def __init__(self, mode: str = "identity", channels: int = 3, latent_channels: int = 8,
                 width: int = 16, seed=0):
        if mode not in ("identity", "tiny_ae"):
            raise ValueError(f"unknown codec mode {mode!r}")
        self.mode = mode
        self.channels = channels
        self.latent_channels = channels if mode == "identity" else latent_channels
        if mode == "tiny_ae":
            rng = _rng(seed)
            self.encoder = Encoder(channels, latent_channels, width, rng)
            self.decoder = Decoder(channels, latent_channels, width, rng)

    def encode(self, x) -> Tensor:
        x = as_tensor(x)
        return x if self.mode == "identity" else self.encoder(x)

    def decode(self, z) -> Tensor:
        z = as_tensor(z)
        return z if self.mode == "identity" else self.decoder(z)

    def decoder_params(self):
        return self.decoder.named_parameters("codec.decoder.") if self.mode == "tiny_ae" else {}


# ---------------------------------------------------------------- denoiser


def timestep_embedding(t: int, dim: int, batch: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    return np.tile(emb.astype(dtype), (batch, 1))


class ConditionalDenoiser(Module):
    def __init__(self, latent_channels: int = 3, width: int = 16, emb_dim: int = 32, seed=0,
                 alpha_bar: np.ndarray | None = None):
        rng = _rng(seed)
        c = width
        self.emb_dim = emb_dim
        self._alpha_bar = None if alpha_bar is None else np.asarray(alpha_bar, dtype=np.float64)
        self.t1 = Linear(emb_dim, 2 * c, rng)
        self.t2 = Linear(2 * c, 2 * c, rng)
        self.temb_full = Linear(2 * c, c, rng, gain=1.0)
        self.temb_half = Linear(2 * c, 2 * c, rng, gain=1.0)
        self.inp = Conv(2 * latent_channels, c, rng)
        self.norm_in = GroupNorm(c)
        self.enc1 = Conv(c, c, rng)
        self.enc2 = Conv(c, 2 * c, rng)
        self.norm_half = GroupNorm(2 * c)
        self.enc3 = Conv(2 * c, 2 * c, rng)
        self.mid = Conv(2 * c, 2 * c, rng)
        self.dec2 = Conv(4 * c, 2 * c, rng)
        self.dec1 = Conv(3 * c, c, rng)
        self.out = Conv(c, latent_channels, rng, gain=0.0 if alpha_bar is not None else 0.1)

    @property
    def anchored(self) -> bool:
        return self._alpha_bar is not None

    def __call__(self, z_t, t: int, cond) -> Tensor:
        z_t, cond = as_tensor(z_t), as_tensor(cond)
        if z_t.shape != cond.shape:
            raise ValueError(f"denoiser: z_t {z_t.shape} vs condition {cond.shape}")
        n = z_t.shape[0]
        emb = Tensor(timestep_embedding(t, self.emb_dim, n, z_t.dtype))
        temb = self.t2(ops.silu(self.t1(emb)))
        h = self.inp(ops.concat_channels(z_t, cond))
        h = ops.silu(self.norm_in(ops.add_channelwise(h, self.temb_full(temb))))
        f1 = ops.silu(self.enc1(h))
        d = self.enc2(ops.avgpool2d(f1))
        d = ops.silu(self.norm_half(ops.add_channelwise(d, self.temb_half(temb))))
        f2 = ops.silu(self.enc3(d))
        f3 = ops.silu(self.mid(ops.avgpool2d(f2)))
        u2 = ops.silu(self.dec2(ops.concat_channels(ops.upsample_nearest(f3), f2)))
        u1 = ops.silu(self.dec1(ops.concat_channels(ops.upsample_nearest(u2), f1)))
        eps = self.out(u1)
        if self._alpha_bar is None:
            return eps
        ab = float(self._alpha_bar[t])
        anchor = (z_t - cond * math.sqrt(ab)) * (1.0 / math.sqrt(1.0 - ab))
        return anchor + eps


# ----------------------------------------------------------------- task net


class TaskNet(Module):
    def __init__(self, channels: int = 3, widths=(16, 32, 64), num_classes: int = 4, seed=0):
        rng = _rng(seed)
        self.widths = tuple(widths)
        self.num_classes = num_classes
        convs, norms = [], []
        cin = channels
        for w in widths:
            convs.append(Conv(cin, w, rng))
            norms.append(GroupNorm(w))
            cin = w
        self.convs = convs
        self.norms = norms
        self.last = Conv(cin, cin, rng)
        self.head = Linear(cin, num_classes, rng, gain=1.0)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def features(self, x) -> Tensor:
        h = as_tensor(x)
        for conv, norm in zip(self.convs, self.norms):
            h = ops.avgpool2d(ops.relu(norm(conv(h))))
        h = ops.relu(self.last(h))
        return ops.global_maxpool(h)

    def __call__(self, x):
        """Returns (features, logits)."""
        f = self.features(x)
        return f, self.head(f)

    def logits(self, x) -> Tensor:
        return self(x)[1]
