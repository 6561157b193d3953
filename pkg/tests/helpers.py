"""Small shared builders for tests."""

import numpy as np

from taskrestore.data import synthesize_corpus
from taskrestore.diffusion import make_schedule
from taskrestore.networks import ConditionalDenoiser, LatentCodec, PreRestorer, TaskNet
from taskrestore.pipeline import PipelineOptions, TrainState

SIZE = 16


def tiny_corpus(seed=0, n_train=32, n_val=8, size=SIZE):
    return synthesize_corpus(seed, n_train, n_val, size)


def tiny_state(seed=0, codec="identity", options=None, freeze_decoder=False):
    r = lambda k: np.random.default_rng([seed, k])  # noqa: E731
    c = LatentCodec(codec, latent_channels=4, width=4, seed=r(1))
    return TrainState(
        prerestorer=PreRestorer(width=4, seed=r(2)),
        codec=c,
        denoiser=ConditionalDenoiser(c.latent_channels, width=4, emb_dim=8, seed=r(3)),
        task=TaskNet(widths=(4, 8), seed=r(4)),
        task_hq=TaskNet(widths=(4, 8), seed=r(5)),
        sched=make_schedule(),
        options=options or PipelineOptions(),
        freeze_decoder=freeze_decoder,
    )


# a whole experiment small enough to run end to end in seconds
TINY_RUN = """
[experiment]
name = tiny
seed = {seed}
[corpus]
n_train = 24
n_val = 12
size = 16
[networks]
task_widths = 4, 8
restorer_width = 4
denoiser_width = 4
emb_dim = 8
[pretrain]
batch = 4
task_hq_iters = 4
restorer_iters = 4
codec_iters = 2
prior_iters = 3
baseline_iters = 3
[train]
N = 5
batch = 4
[eval]
runs = 2
n_values = 1, 4
[ablation]
N = 3
step_sweep = 1, 4
"""
