"""DDIM inversion and the substituted reconstruction pass that fills the feature cache."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .attention import RecordingControl, ShareConfig, SourceFeatureCache
from .denoiser import TextCondition, guided_noise
from .errors import ConfigurationError, InversionFailure
from .schedule import NoiseSchedule, ddim_invert_step, ddim_step, step_coefficients_at


@dataclass
class InversionTrajectory:
    latents: list  # level 0 (clean) .. level S (z_T)
    prompt: TextCondition
    cfg_scale: float | None
    schedule_id: str

    @property
    def z_T(self):
        return self.latents[-1]

    def save(self, path) -> None:
        import numpy as np

        np.savez(path, **{f"level{j}": z.cpu().numpy() for j, z in enumerate(self.latents)})


@torch.no_grad()
def invert(z0, cond: TextCondition, backend, sched: NoiseSchedule, cfg_scale: float | None = 7.5,
           null: TextCondition | None = None) -> InversionTrajectory:
    """Run DDIM backwards from the clean latent to level S.

    The transition level j -> j+1 evaluates the denoiser on level j at the
    timestep of level j+1.
    """
    null = null if null is not None else backend.null_condition()
    latents = [z0]
    for j in range(sched.S):
        step = sched.S - j  # the sampling step that undoes this transition
        t, _ = sched.step_timesteps(step)
        eps = guided_noise(backend, latents[j], t, cond, null, cfg_scale)
        z_next = ddim_invert_step(latents[j], eps, step_coefficients_at(step, sched))
        if not torch.isfinite(z_next).all():
            raise InversionFailure(f"non-finite latent at inversion step {j + 1}", step=j + 1)
        latents.append(z_next)
    return InversionTrajectory(latents, cond, cfg_scale, sched.schedule_id)


@torch.no_grad()
def reconstruct_with_substitution(traj: InversionTrajectory, share_cfg: ShareConfig, backend,
                                  sched: NoiseSchedule, null: TextCondition | None = None):
    """Source-branch sampling with every denoiser input forced onto the pivotal trajectory.

    Each step replays exactly the (input, timestep, prompt) the inversion used
    for that transition, so the recorded attention features are the inversion's
    own and the clean latent is recovered up to rounding.  Returns
    ``(recon, cache)``.
    """
    if traj.schedule_id != sched.schedule_id or len(traj.latents) != sched.S + 1:
        raise ConfigurationError(
            f"trajectory ({traj.schedule_id}, {len(traj.latents)} latents) does not match schedule {sched.schedule_id}")
    share_cfg.validate(backend, sched.S)
    null = null if null is not None else backend.null_condition()
    cache = SourceFeatureCache(share_cfg.grid())
    control = RecordingControl(share_cfg, cache)
    z = traj.latents[-1]
    for step in range(1, sched.S + 1):
        hi, lo = sched.step_levels(step)
        t, _ = sched.step_timesteps(step)
        control.step = step
        eps = guided_noise(backend, traj.latents[lo], t, traj.prompt, null, traj.cfg_scale, control)
        z = ddim_step(traj.latents[hi], eps, step_coefficients_at(step, sched))
    cache.z0 = z
    return z, cache.freeze()
