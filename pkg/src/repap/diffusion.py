"""x0-prediction DDPM core: cosine schedule, forward noising, posterior
reverse steps, observation clamping, parameter EMA, checkpoints.

Timesteps are 1-based (t in [1, T]); schedule tables are stored 0-based in
float64 so identities like alpha_bar_t = alpha_bar_{t-1} (1 - beta_t) hold
to the last ulp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch

CHECKPOINT_VERSION = 1


class CheckpointFormatError(RuntimeError):
    """Checkpoint file missing required fields or from an unknown version."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete-time noising schedule.

    beta_tilde follows the posterior-variance formula with alpha_bar_0 = 1,
    so beta_tilde[0] (t=1) is exactly zero; sigma2 exposes the floored
    version used as a loss weight.
    """

    beta: torch.Tensor
    alpha_bar: torch.Tensor
    beta_tilde: torch.Tensor

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    @property
    def alpha(self) -> torch.Tensor:
        return 1.0 - self.beta

    @property
    def alpha_bar_prev(self) -> torch.Tensor:
        return torch.cat([torch.ones_like(self.alpha_bar[:1]), self.alpha_bar[:-1]])

    @property
    def sigma2_floor(self) -> float:
        return float(self.beta_tilde[1])

    def sigma2(self, t: int | torch.Tensor) -> torch.Tensor:
        """Loss-weight variance: max(beta_tilde_t, beta_tilde_2)."""
        idx = self._index(t)
        return torch.clamp(self.beta_tilde[idx], min=self.sigma2_floor)

    def _index(self, t: int | torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValueError(f"t must lie in [1, {self.T}]")
        return t - 1


def make_cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine alpha_bar ramp with beta clipping at 0.999.

    After clipping, alpha_bar is recomputed as the cumulative product of
    (1 - beta) so the schedule identities are exact rather than
    approximate.
    """
    if T < 2:
        raise ValueError("schedule needs at least 2 steps")
    u = torch.linspace(0.0, 1.0, T + 1, dtype=torch.float64)
    f = torch.cos((u + s) / (1.0 + s) * (math.pi / 2)) ** 2
    alpha_bar = f / f[0]
    beta = torch.clamp(1.0 - alpha_bar[1:] / alpha_bar[:-1], max=0.999)
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    prev = torch.cat([torch.ones_like(alpha_bar[:1]), alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, beta_tilde=beta_tilde)


def schedule_from_beta(beta: torch.Tensor) -> NoiseSchedule:
    """Rebuild a schedule from its stored beta table (checkpoint restore)."""
    beta = torch.as_tensor(beta, dtype=torch.float64)
    if beta.ndim != 1 or beta.numel() < 2:
        raise ValueError("beta table must be 1-D with at least 2 entries")
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    prev = torch.cat([torch.ones_like(alpha_bar[:1]), alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, beta_tilde=beta_tilde)


def _gather(table: torch.Tensor, idx: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """table[idx] broadcast against a [B, ...] tensor, matching its dtype."""
    vals = table[idx].to(like.dtype)
    return vals.reshape(idx.shape + (1,) * (like.ndim - idx.ndim))


def forward_diffuse(
    x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0 shape")
    idx = sched._index(t)
    ab = _gather(sched.alpha_bar, idx, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def data_loss(
    x0: torch.Tensor, x0_hat: torch.Tensor, t: int | torch.Tensor,
    sched: NoiseSchedule, lambda_t: float = 1.0,
) -> torch.Tensor:
    """Denoising objective lambda_t ||x0 - x0_hat||^2 (mean over batch)."""
    if x0.shape != x0_hat.shape:
        raise ValueError("x0 and x0_hat must have the same shape")
    sched._index(t)  # validate range; uniform lambda_t needs no lookup
    diff = (x0 - x0_hat) ** 2
    if diff.ndim == 0:
        return lambda_t * diff
    per_sample = diff.reshape(diff.shape[0], -1).sum(dim=1)
    return lambda_t * per_sample.mean()


def posterior_sigma2(t: int | torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Floored posterior variance used to weight the physics losses."""
    return sched.sigma2(t)


def posterior_mean(
    x_t: torch.Tensor, x0_hat: torch.Tensor, t: int | torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """mu_tilde(x_t, x0_hat) of the x0-parameterized reverse kernel."""
    idx = sched._index(t)
    beta = _gather(sched.beta, idx, x_t)
    ab = _gather(sched.alpha_bar, idx, x_t)
    ab_prev = _gather(sched.alpha_bar_prev, idx, x_t)
    alpha = 1.0 - beta
    c0 = torch.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = torch.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0_hat + ct * x_t


def reverse_step(
    x_t: torch.Tensor, x0_hat: torch.Tensor, t: int | torch.Tensor,
    sched: NoiseSchedule, noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}.

    The final step (t=1) returns x0_hat exactly: beta_tilde_1 = 0 kills the
    stochastic term and the mean coefficients collapse onto x0_hat.
    """
    idx = sched._index(t)
    if torch.all(idx == 0):
        return x0_hat
    out = posterior_mean(x_t, x0_hat, t, sched)
    if noise is not None:
        out = out + torch.sqrt(_gather(sched.beta_tilde, idx, x_t)) * noise
    if torch.any(idx == 0):
        # mixed batch: overwrite the t=1 rows with the exact collapse
        collapse = (idx == 0).reshape((-1,) + (1,) * (x_t.ndim - 1))
        out = torch.where(collapse, x0_hat, out)
    return out


def clamp_observed(
    x: torch.Tensor, mask: torch.Tensor, observed: torch.Tensor
) -> torch.Tensor:
    """Overwrite observed entries, leave the rest untouched (idempotent)."""
    if x.shape[-2:] != observed.shape[-2:] or mask.shape[-2:] != x.shape[-2:]:
        raise ValueError("x, mask, observed must share spatial shape")
    m = mask.to(x.dtype)
    return x * (1.0 - m) + observed.to(x.dtype) * m


@dataclass
class EmaState:
    """Exponential moving average of named parameters."""

    decay: float
    shadow: dict[str, torch.Tensor]

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("EMA decay must lie in (0, 1)")

    @classmethod
    def from_module(cls, module: torch.nn.Module, decay: float = 0.99) -> "EmaState":
        shadow = {
            name: p.detach().clone() for name, p in module.named_parameters()
        }
        return cls(decay=decay, shadow=shadow)

    def copy_to(self, module: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(self.shadow[name])


def ema_update(ema: EmaState, live: torch.nn.Module | dict) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * live, in place."""
    named = live.named_parameters() if isinstance(live, torch.nn.Module) else live.items()
    with torch.no_grad():
        for name, p in named:
            target = ema.shadow[name]
            if target.shape != p.shape:
                raise ValueError(f"EMA shape mismatch for {name}")
            target.mul_(ema.decay).add_(p.detach(), alpha=1.0 - ema.decay)
    return ema


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    ema: EmaState | None,
    sched: NoiseSchedule,
    step: int,
    heads: torch.nn.Module | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    config: dict | None = None,
    norm_stats: dict | None = None,
) -> None:
    """Single-file checkpoint: parameter blobs, EMA, schedule, counters."""
    blob = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "schedule": {"T": sched.T, "beta": sched.beta},
        "model": model.state_dict(),
        "heads": heads.state_dict() if heads is not None else None,
        "ema": {"decay": ema.decay, "shadow": ema.shadow} if ema else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": config,
        "norm_stats": norm_stats,
    }
    torch.save(blob, str(path))


def load_checkpoint(path: str | Path) -> dict:
    """Load and validate a checkpoint blob (raises CheckpointFormatError)."""
    try:
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointFormatError(f"unreadable checkpoint: {e}") from e
    if not isinstance(blob, dict) or "version" not in blob:
        raise CheckpointFormatError("not a checkpoint file")
    if blob["version"] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {blob['version']}")
    for key in ("step", "schedule", "model"):
        if key not in blob:
            raise CheckpointFormatError(f"checkpoint missing field {key!r}")
    return blob
