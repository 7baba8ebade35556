"""Deterministic DDIM arithmetic and the noise schedule.

Latent *levels* are numbered 0..S: level 0 is the clean latent (alpha_bar = 1)
and level j >= 1 sits at training timestep ``level_timesteps[j - 1]``.
Sampling *steps* are numbered 1..S in loop order, so step i moves the latent
from level S - i + 1 down to level S - i (step 1 is the noisiest).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgument, NumericFailure


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    num_inference_steps: int = 50
    alphas_cumprod: np.ndarray = field(init=False, repr=False, compare=False)
    inference_timesteps: tuple[int, ...] = field(init=False, compare=False)

    def __post_init__(self):
        if self.num_train_steps < 1:
            raise InvalidArgument("num_train_steps must be positive")
        if not 0 <= self.num_inference_steps <= self.num_train_steps:
            raise InvalidArgument("num_inference_steps must lie in [0, num_train_steps]")
        betas = np.linspace(self.beta_start, self.beta_end, self.num_train_steps, dtype=np.float64)
        object.__setattr__(self, "alphas_cumprod", np.cumprod(1.0 - betas))
        S = self.num_inference_steps
        # trailing spacing: the noisiest level lands on the last training step
        ts = [int(round((j + 1) * self.num_train_steps / S)) - 1 for j in range(S)] if S else []
        object.__setattr__(self, "inference_timesteps", tuple(reversed(ts)))

    @property
    def S(self) -> int:
        return self.num_inference_steps

    @property
    def schedule_id(self) -> str:
        return f"linear-{self.num_train_steps}-{self.beta_start:g}-{self.beta_end:g}-S{self.S}"

    def to_dict(self) -> dict:
        return {
            "num_train_steps": self.num_train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "S": self.S,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["num_train_steps"]), float(d["beta_start"]), float(d["beta_end"]), int(d["S"]))

    def level_timestep(self, level: int) -> int:
        """Training timestep of latent level ``level`` (1..S)."""
        if not 1 <= level <= self.S:
            raise InvalidArgument(f"level {level} outside [1, {self.S}]")
        return self.inference_timesteps[self.S - level]

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at training timestep ``t``; ``t = -1`` denotes the clean latent."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.num_train_steps:
            raise InvalidArgument(f"timestep {t} outside [0, {self.num_train_steps})")
        return float(self.alphas_cumprod[t])

    def level_alpha_bar(self, level: int) -> float:
        return 1.0 if level == 0 else self.alpha_bar(self.level_timestep(level))

    def step_levels(self, step: int) -> tuple[int, int]:
        """(from_level, to_level) of sampling step ``step`` (1..S)."""
        if not 1 <= step <= self.S:
            raise InvalidArgument(f"step {step} outside [1, {self.S}]")
        return self.S - step + 1, self.S - step

    def step_timesteps(self, step: int) -> tuple[int, int]:
        """(t, t_prev) training timesteps of a sampling step; t_prev is -1 on the last step."""
        hi, lo = self.step_levels(step)
        return self.level_timestep(hi), (self.level_timestep(lo) if lo else -1)


@dataclass(frozen=True)
class StepCoefficients:
    k1: float
    k2: float

    def __post_init__(self):
        if not self.k1 > 0:
            raise InvalidArgument(f"k1 must be positive, got {self.k1}")


def coefficients_from_alphas(alpha_t: float, alpha_prev: float) -> StepCoefficients:
    k1 = math.sqrt(alpha_prev / alpha_t)
    k2 = math.sqrt(1.0 - alpha_prev) - math.sqrt(alpha_prev * (1.0 - alpha_t) / alpha_t)
    return StepCoefficients(k1, k2)


def step_coefficients(t: int, t_prev: int, sched: NoiseSchedule) -> StepCoefficients:
    """Coefficients of the deterministic DDIM update z_prev = k1 z_t + k2 eps.

    ``t_prev = -1`` is the clean level.
    """
    if t_prev >= t:
        raise InvalidArgument(f"t_prev ({t_prev}) must be smaller than t ({t})")
    return coefficients_from_alphas(sched.alpha_bar(t), sched.alpha_bar(t_prev))


def step_coefficients_at(step: int, sched: NoiseSchedule) -> StepCoefficients:
    return step_coefficients(*sched.step_timesteps(step), sched)


def forward_noise(z0: torch.Tensor, alpha_bar: float | torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise InvalidArgument(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    if isinstance(alpha_bar, torch.Tensor):
        alpha_bar = alpha_bar.to(z0.dtype).reshape(-1, *([1] * (z0.dim() - 1)))
        return alpha_bar.sqrt() * z0 + (1 - alpha_bar).sqrt() * eps
    return math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * eps


def ddim_step(z_t: torch.Tensor, eps_pred: torch.Tensor, coeffs: StepCoefficients) -> torch.Tensor:
    if not torch.isfinite(eps_pred).all():
        raise NumericFailure("non-finite noise prediction")
    return coeffs.k1 * z_t + coeffs.k2 * eps_pred


def ddim_invert_step(z_prev: torch.Tensor, eps_pred: torch.Tensor, coeffs: StepCoefficients) -> torch.Tensor:
    if coeffs.k1 == 0:
        raise InvalidArgument("k1 = 0 has no inverse")
    return (z_prev - coeffs.k2 * eps_pred) / coeffs.k1
