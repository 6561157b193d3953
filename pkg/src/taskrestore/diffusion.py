"""Noise schedules, forward/partial diffusion, timestep plans and denoising.

Timesteps are 1-indexed: ``alpha_bar[t]`` for t in [1, T], with
``alpha_bar[0] = 1``. All functions accept numpy arrays or autodiff Tensors
for the latent operands, so the one-step path can run inside a recorded graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, as_tensor

Denoiser = Callable[[object, int, object], object]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # index 0 unused
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def sqrt_ab(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[t])

    def sqrt_one_minus_ab(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[t])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.empty(T + 1, dtype=np.float64)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else [beta_start]
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def _shape(x):
    return x.shape


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule):
    """sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    sched.check_t(t)
    if _shape(z0) != _shape(eps):
        raise ValueError(f"forward_diffuse: z0 shape {_shape(z0)} != eps shape {_shape(eps)}")
    a, s = sched.sqrt_ab(t), sched.sqrt_one_minus_ab(t)
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        return as_tensor(z0) * a + as_tensor(eps) * s
    dt = np.result_type(z0, eps)
    return (np.asarray(z0, dt) * dt.type(a) + np.asarray(eps, dt) * dt.type(s)).astype(dt)


def partial_diffuse(z_pre_res, t: int, t_p: int, eps, sched: NoiseSchedule):
    """Forward diffusion anchored at the pre-restored latent, capped at t_p."""
    if t > t_p:
        raise ValueError(f"partial diffusion timestep {t} exceeds t_p={t_p}")
    return forward_diffuse(z_pre_res, t, eps, sched)


@dataclass(frozen=True)
class TimestepPlan:
    t_p: int
    n: int
    steps: tuple[int, ...]


def make_plan(t_p: int, n: int, T: int | None = None) -> TimestepPlan:
    """steps = [floor(t_p*k/n) for k = n..1], strictly decreasing."""
    if T is not None and not 1 <= t_p <= T:
        raise ValueError(f"t_p={t_p} outside [1, {T}]")
    if t_p < 1:
        raise ValueError("t_p must be >= 1")
    if not 1 <= n <= t_p:
        raise ValueError(f"need 1 <= n <= t_p, got n={n}, t_p={t_p}")
    steps = tuple((t_p * k) // n for k in range(n, 0, -1))
    return TimestepPlan(t_p, n, steps)


def one_step_denoise(z_t, t: int, z_pre_res, eps_theta: Denoiser, sched: NoiseSchedule):
    """Predict z0 in one shot: (z_t - sqrt(1-ab_t) * eps_hat) / sqrt(ab_t)."""
    sched.check_t(t)
    eps_hat = eps_theta(z_t, t, z_pre_res)
    a, s = sched.sqrt_ab(t), sched.sqrt_one_minus_ab(t)
    if isinstance(z_t, Tensor) or isinstance(eps_hat, Tensor):
        return (as_tensor(z_t) - as_tensor(eps_hat) * s) * (1.0 / a)
    # float64 arithmetic, result in the latent's precision
    dt = np.asarray(z_t).dtype if np.asarray(z_t).dtype.kind == "f" else np.float64
    out = (np.asarray(z_t, np.float64) - np.asarray(eps_hat, np.float64) * s) / a
    return out.astype(dt)


def n_step_denoise(
    z_pre_res,
    plan: TimestepPlan,
    eps_theta: Denoiser,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    start_from_noise: bool = False,
):
    """Partial-diffuse to t_p, then denoise through every step of the plan.

    Between steps the predicted z0 is pushed forward to the next timestep with
    fresh noise. ``start_from_noise`` replaces the partially diffused start
    with pure Gaussian noise (the conventional sampler, used for ablations).
    """
    shape = _shape(z_pre_res)
    data = z_pre_res.data if isinstance(z_pre_res, Tensor) else np.asarray(z_pre_res)
    dt = data.dtype

    def draw():
        return rng.standard_normal(shape).astype(dt)

    if start_from_noise:
        z = draw()
    else:
        z = partial_diffuse(z_pre_res, plan.t_p, plan.t_p, draw(), sched)
    z_hat = None
    for j, t in enumerate(plan.steps):
        z_hat = one_step_denoise(z, t, z_pre_res, eps_theta, sched)
        if j != len(plan.steps) - 1:
            z = forward_diffuse(z_hat, plan.steps[j + 1], draw(), sched)
    return z_hat


class OracleDenoiser:
    """Returns the exact noise injected around a known clean latent.

    With ``z0=None`` the clean latent is taken to be the condition argument,
    which is what partial diffusion anchors on.
    """

    def __init__(self, sched: NoiseSchedule, z0=None, perturbation=None):
        self.sched = sched
        self.z0 = z0
        self.perturbation = perturbation

    def __call__(self, z_t, t, cond):
        z0 = cond if self.z0 is None else self.z0
        as_tensor_out = isinstance(z_t, Tensor)
        z_t = z_t.data if as_tensor_out else z_t
        z0 = z0.data if isinstance(z0, Tensor) else z0
        # kept in float64 for numpy inputs so the inversion cancels exactly
        eps = (np.asarray(z_t, np.float64) - self.sched.sqrt_ab(t) * np.asarray(z0, np.float64))
        eps /= self.sched.sqrt_one_minus_ab(t)
        if self.perturbation is not None:
            eps = eps + self.perturbation
        return eps.astype(z_t.dtype) if as_tensor_out else eps


def noise_prediction_loss_inputs(z0, t: int, sched: NoiseSchedule, rng: np.random.Generator):
    """Sample eps and build z_t for the conventional noise-prediction objective."""
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    return forward_diffuse(z0, t, eps, sched), eps
