import pytest
import torch

from dualedit.attention import ShareConfig, ShareMode
from dualedit.errors import ConfigurationError, InversionFailure
from dualedit.inversion import invert, reconstruct_with_substitution
from dualedit.schedule import NoiseSchedule


class Spy:
    """Wraps a backend and records every predict_noise input."""

    def __init__(self, backend):
        self.backend = backend
        self.sites = backend.sites
        self.inputs = []

    def predict_noise(self, z, t, cond, attn_control=None):
        self.inputs.append((z.detach().clone(), int(t)))
        return self.backend.predict_noise(z, t, cond, attn_control)

    def null_condition(self):
        return self.backend.null_condition()


CFG = ShareConfig(ShareMode.Q_SHARE, {4, 5, 6, 7}, (2, 6))


def test_zero_step_schedule(tiny_backend, source_latent):
    s = NoiseSchedule(num_inference_steps=0)
    traj = invert(source_latent, tiny_backend.null_condition(), tiny_backend, s)
    assert len(traj.latents) == 1 and torch.equal(traj.latents[0], source_latent)
    recon, cache = reconstruct_with_substitution(traj, ShareConfig(ShareMode.Q_SHARE, set(), None), tiny_backend, s)
    assert torch.equal(recon, source_latent) and len(cache) == 0


def test_inversion_deterministic(tiny_backend, short_schedule, source_latent):
    a = invert(source_latent, tiny_backend.null_condition(), tiny_backend, short_schedule)
    b = invert(source_latent, tiny_backend.null_condition(), tiny_backend, short_schedule)
    assert all(torch.equal(x, y) for x, y in zip(a.latents, b.latents))
    assert len(a.latents) == short_schedule.S + 1
    assert torch.equal(a.latents[0], source_latent)


def test_reconstruction_recovers_source_and_replays_inputs(tiny_backend, short_schedule, source_latent):
    spy = Spy(tiny_backend)
    traj = invert(source_latent, tiny_backend.null_condition(), spy, short_schedule)
    inv_inputs = list(spy.inputs)
    spy.inputs.clear()
    recon, cache = reconstruct_with_substitution(traj, CFG, spy, short_schedule)
    rec_inputs = spy.inputs
    S = short_schedule.S
    # exactly S denoiser calls for each pass
    assert len(inv_inputs) == S and len(rec_inputs) == S
    # bitwise: reconstruction replays the inversion's (input, timestep) pairs in reverse order
    for (zi, ti), (zr, tr) in zip(reversed(inv_inputs), rec_inputs):
        assert ti == tr and torch.equal(zi, zr)
    assert set(torch.equal(z, traj.latents[j]) for j, (z, _) in enumerate(inv_inputs)) == {True}
    assert (recon - source_latent).abs().max() < 1e-5
    assert cache.keys() == CFG.grid()
    assert torch.equal(cache.z0, recon)


def test_cached_query_matches_manual_recompute(tiny_backend, short_schedule, source_latent):
    traj = invert(source_latent, tiny_backend.null_condition(), tiny_backend, short_schedule)
    _, cache = reconstruct_with_substitution(traj, CFG, tiny_backend, short_schedule)
    step, layer = 4, 6
    block = tiny_backend.up8_attn1
    assert block.site.layer_index == layer
    captured = {}
    handle = block.norm1.register_forward_hook(lambda m, i, o: captured.setdefault("x", o.detach()))
    _, lo = short_schedule.step_levels(step)
    t, _ = short_schedule.step_timesteps(step)
    with torch.no_grad():
        tiny_backend.predict_noise(traj.latents[lo], t, tiny_backend.null_condition())
    handle.remove()
    x = captured["x"]
    W = block.site.W_q
    q = (x @ W.T).view(1, -1, 2, W.shape[0] // 2).transpose(1, 2)
    assert torch.allclose(cache[(step, layer)]["q"], q, atol=1e-12)


def test_mismatched_schedule_rejected(tiny_backend, short_schedule, source_latent):
    traj = invert(source_latent, tiny_backend.null_condition(), tiny_backend, short_schedule)
    with pytest.raises(ConfigurationError):
        reconstruct_with_substitution(traj, CFG, tiny_backend, NoiseSchedule(num_inference_steps=7))


def test_nonfinite_inversion_reports_step(tiny_backend, short_schedule, source_latent):
    class Exploding(Spy):
        def predict_noise(self, z, t, cond, attn_control=None):
            out = super().predict_noise(z, t, cond, attn_control)
            return out * (float("inf") if len(self.inputs) == 3 else 1.0)

    with pytest.raises(InversionFailure) as err:
        invert(source_latent, tiny_backend.null_condition(), Exploding(tiny_backend), short_schedule)
    assert err.value.step == 3
