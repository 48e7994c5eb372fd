"""Forward corruption, guided noise prediction, and ancestral reverse sampling.

All operations are pure given explicit noise inputs; ``sample`` owns a
seeded generator so full sampling runs are reproducible. Steps are
1-indexed: t ranges over [1, T], and the step-t coefficients live at
beta[t-1] / sigma[t-1] / alpha_bar[t] of the schedule arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .schedule import NoiseSchedule


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scale, train-time null-conditioning probability, and the
    null token standing in for "no condition" (an all-zeros latent)."""

    scale: float = 2.0
    p_uncond: float = 0.1
    null_token: torch.Tensor = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError(f"p_uncond must be in [0, 1], got {self.p_uncond}")
        if self.null_token is None:
            raise ValueError("null_token is required (use GuidanceConfig.for_z_dim)")

    @staticmethod
    def for_z_dim(z_dim: int, scale: float = 2.0, p_uncond: float = 0.1) -> "GuidanceConfig":
        return GuidanceConfig(scale=scale, p_uncond=p_uncond, null_token=torch.zeros(z_dim))


@dataclass(frozen=True)
class DiffusionState:
    """A partially denoised image and its step index."""

    x_t: torch.Tensor
    t: int

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"step index must be >= 1, got {self.t}")


def _check_t(t, T: int) -> None:
    if torch.is_tensor(t):
        if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > T:
            raise ValueError(f"step indices must lie in [1, {T}]")
    elif not 1 <= int(t) <= T:
        raise ValueError(f"step index {t} outside [1, {T}]")


def _gather(values: np.ndarray, t, x: torch.Tensor) -> torch.Tensor | float:
    """Schedule coefficient at step t, broadcastable against x."""
    if torch.is_tensor(t):
        table = torch.as_tensor(values, dtype=x.dtype, device=x.device)
        return table[t].reshape(-1, *([1] * (x.dim() - 1)))
    return float(values[int(t)])


def q_sample(
    x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Forward corruption: sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    _check_t(t, schedule.T)
    a = _gather(schedule.alpha_bar, t, x0)
    if torch.is_tensor(a):
        return a.sqrt() * x0 + (1.0 - a).sqrt() * eps
    return a**0.5 * x0 + (1.0 - a) ** 0.5 * eps


def guided_eps(
    eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float
) -> torch.Tensor:
    """Classifier-free combination: eps_uncond + s * (eps_cond - eps_uncond),
    evaluated as (1 - s) * eps_uncond + s * eps_cond so the endpoints s = 0
    and s = 1 reproduce their operand exactly."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    return (1.0 - s) * eps_uncond + s * eps_cond


def predict_x0(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t,
    schedule: NoiseSchedule,
    clamp: bool = True,
) -> torch.Tensor:
    """Invert the forward corruption given a noise estimate; the result is
    clamped to the model domain [-1, 1] unless ``clamp`` is False."""
    _check_t(t, schedule.T)
    a = _gather(schedule.alpha_bar, t, x_t)
    if torch.is_tensor(a):
        x0 = (x_t - (1.0 - a).sqrt() * eps_hat) / a.sqrt()
    else:
        x0 = (x_t - (1.0 - a) ** 0.5 * eps_hat) / a**0.5
    return x0.clamp(-1.0, 1.0) if clamp else x0


def p_step(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral reverse step. At t = 1 the mean is returned exactly
    (no noise is injected)."""
    _check_t(t, schedule.T)
    t = int(t)
    beta = schedule.beta_at(t)
    a_bar = schedule.alpha_bar_at(t)
    mean = (x_t - (beta / (1.0 - a_bar) ** 0.5) * eps_hat) / (1.0 - beta) ** 0.5
    if t == 1 or noise is None:
        return mean
    return mean + schedule.sigma_at(t) * noise


def sample(
    denoiser,
    z_sem: torch.Tensor,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    rng_seed: int,
    ldr: torch.Tensor | None = None,
) -> torch.Tensor:
    """Full reverse-process sampling from pure noise, guided by z_sem.

    Each step evaluates the denoiser with the condition and with the null
    token and blends the two predictions with the guidance scale. The run
    is deterministic for a fixed seed. Returns a model-domain image; the
    caller converts back to linear radiance through the log-domain decode.
    ``ldr`` is forwarded to the denoiser only for the spatial-concat
    conditioning experiment.
    """
    config = denoiser.config
    single = z_sem.dim() == 1
    z = z_sem.unsqueeze(0) if single else z_sem
    batch = z.shape[0]
    null = guidance.null_token.to(z.dtype)
    if null.shape[-1] != z.shape[-1]:
        raise ValueError(
            f"null_token dim {null.shape[-1]} != z_sem dim {z.shape[-1]}"
        )
    null = null.unsqueeze(0).expand(batch, -1)
    kwargs = {} if ldr is None else {"ldr": ldr}

    gen = torch.Generator(device="cpu").manual_seed(rng_seed)
    shape = (batch, 3, config.base_resolution, config.base_resolution)
    x = torch.randn(shape, generator=gen)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_c = denoiser(x, t, z, **kwargs)
            eps_u = denoiser(x, t, null, **kwargs)
            eps_hat = guided_eps(eps_c, eps_u, guidance.scale)
            noise = torch.randn(shape, generator=gen) if t > 1 else None
            x = p_step(x, t, eps_hat, schedule, noise)
    x = x.clamp(-1.0, 1.0)
    return x.squeeze(0) if single else x
