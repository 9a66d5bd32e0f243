"""Closed-form diffusion math: noise schedules, forward noising, the
noise-prediction loss, and the ancestral reverse-step update."""

from dataclasses import dataclass, field

import torch

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion coefficients over T steps.

    All arrays are float64 torch tensors of length T. Immutable after
    construction; safe to share across workers.
    """

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    posterior_vars: torch.Tensor
    kind: str = "linear"

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"schedule needs T >= 2, got {self.T}")
        for name in ("betas", "alphas", "alpha_bars", "posterior_vars"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {tuple(arr.shape)}")
        if not bool(((self.betas > 0) & (self.betas < 1)).all()):
            raise ValueError("betas must lie in (0, 1)")


def build_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule of T steps.

    kind="linear": beta ramps from 1e-4 to 0.02.
    kind="cosine": squared-cosine alpha_bar profile with betas clipped to 0.999.
    """
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        betas = torch.linspace(1e-4, 0.02, T, dtype=torch.float64)
    elif kind == "cosine":
        s = 0.008
        ts = torch.arange(T + 1, dtype=torch.float64) / T
        f = torch.cos((ts + s) / (1 + s) * torch.pi / 2) ** 2
        abar = f / f[0]
        betas = torch.clip(1 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    # sigma_t^2 fixed to beta_t
    posterior_vars = betas.clone()
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars,
                         posterior_vars=posterior_vars, kind=kind)


def subsample_schedule(schedule: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, torch.Tensor]:
    """Uniformly stride a trained schedule down to `steps` reverse steps.

    Re-derives betas so that the strided alpha_bar sequence is exact:
    alpha'_i = abar[t_i] / abar[t_{i-1}]. Returns the reduced schedule and
    the original step index each reduced step corresponds to.
    """
    if not (2 <= steps <= schedule.T):
        raise ValueError(f"steps must be in [2, T={schedule.T}], got {steps}")
    idx = torch.linspace(0, schedule.T - 1, steps).round().long()
    abar = schedule.alpha_bars[idx]
    alphas = abar.clone()
    alphas[1:] = abar[1:] / abar[:-1]
    betas = 1.0 - alphas
    betas = torch.clip(betas, 1e-12, 1 - 1e-12)
    return NoiseSchedule(T=steps, betas=betas, alphas=1.0 - betas, alpha_bars=abar,
                         posterior_vars=betas.clone(), kind=schedule.kind), idx


def _check_t(schedule: NoiseSchedule, t) -> None:
    t = torch.as_tensor(t)
    if bool((t < 0).any()) or bool((t >= schedule.T).any()):
        raise ValueError(f"step index out of range [0, {schedule.T})")


def forward_noise(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """xt = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise.

    t may be a scalar index or a batch of indices (one per leading-dim entry).
    """
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")
    _check_t(schedule, t)
    abar = schedule.alpha_bars.to(x0.dtype)[t]
    if abar.ndim > 0:  # per-sample t: broadcast over trailing dims
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise


def invert_noise(schedule: NoiseSchedule, xt: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """Recover x0 from (xt, noise): x0 = (xt - sqrt(1-abar_t)*noise) / sqrt(abar_t)."""
    _check_t(schedule, t)
    abar = schedule.alpha_bars.to(xt.dtype)[t]
    if abar.ndim > 0:
        abar = abar.reshape(-1, *([1] * (xt.ndim - 1)))
    return (xt - torch.sqrt(1.0 - abar) * noise) / torch.sqrt(abar)


def loss(schedule: NoiseSchedule, model, x0: torch.Tensor, image: torch.Tensor, t,
         noise: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the true noise and the model's prediction
    at the noised input. `model` is called as model(xt, image, t)."""
    xt = forward_noise(schedule, x0, t, noise)
    pred = model(xt, image, t)
    return torch.mean((noise - pred) ** 2)


def reverse_step(schedule: NoiseSchedule, xt: torch.Tensor, predicted_noise: torch.Tensor,
                 t: int, z: torch.Tensor) -> torch.Tensor:
    """One ancestral reverse step:

    x_{t-1} = (xt - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z
    """
    if not (0 <= t < schedule.T):
        raise ValueError(f"step index {t} out of range [0, {schedule.T})")
    if t == 0 and bool((torch.as_tensor(z) != 0).any()):
        raise ValueError("z must be the zero tensor at t=0")
    dtype = xt.dtype
    alpha = schedule.alphas[t].to(dtype)
    beta = schedule.betas[t].to(dtype)
    abar = schedule.alpha_bars[t].to(dtype)
    sigma = torch.sqrt(schedule.posterior_vars[t]).to(dtype)
    mean = (xt - beta / torch.sqrt(1.0 - abar) * predicted_noise) / torch.sqrt(alpha)
    return mean + sigma * z
