import numpy as np
import pytest
import torch

from dualedit.denoiser import (DenoiserTrainConfig, IdentityControl, LinearDenoiser, TextCondition, ToyCodec,
                               ToyDenoiser, cfg_combine, evaluation_error, guided_noise, load_denoiser,
                               save_checkpoint, toy_training_set, train_toy_denoiser)
from dualedit.errors import ConfigurationError, InvalidArgument
from dualedit.schedule import NoiseSchedule
from dualedit.toydata import ToyScene, all_scenes, render

from conftest import TINY_ARCH, make_tiny_backend, state_checksum


def test_eight_sites_in_execution_order(tiny_backend):
    assert [s.layer_index for s in tiny_backend.sites] == list(range(8))
    seen = []

    class Spy(IdentityControl):
        def __call__(self, site, x):
            seen.append(site.layer_index)
            return super().__call__(site, x)

    tiny_backend.predict_noise(torch.zeros(4, 16, 16, dtype=torch.float64), 10, tiny_backend.null_condition(),
                               Spy(range(8)))
    assert seen == list(range(8))


def test_identity_hooks_are_bitwise_identical(tiny_backend):
    z = torch.randn(2, 4, 16, 16, dtype=torch.float64)
    cond = tiny_backend.encode_text(ToyScene())
    plain = tiny_backend.predict_noise(z, 500, cond)
    hooked = tiny_backend.predict_noise(z, 500, cond, IdentityControl(range(8)))
    assert torch.equal(plain, hooked)


def test_prediction_deterministic_and_shape(tiny_backend):
    z = torch.randn(4, 16, 16, dtype=torch.float64)
    cond = tiny_backend.encode_text(ToyScene(shape="circle"))
    a = tiny_backend.predict_noise(z, 100, cond)
    b = tiny_backend.predict_noise(z, 100, cond)
    assert a.shape == z.shape and torch.equal(a, b)


def test_unbatched_matches_batched(tiny_backend):
    z = torch.randn(4, 16, 16, dtype=torch.float64)
    cond = tiny_backend.encode_text(ToyScene())
    assert torch.allclose(tiny_backend.predict_noise(z, 7, cond), tiny_backend.predict_noise(z[None], 7, cond)[0],
                          atol=1e-12)


def test_unknown_hook_site_rejected(tiny_backend):
    with pytest.raises(ConfigurationError):
        tiny_backend.predict_noise(torch.zeros(4, 16, 16, dtype=torch.float64), 1,
                                   tiny_backend.null_condition(), IdentityControl({8}))


def test_null_condition_is_constant(tiny_backend):
    a, b = tiny_backend.null_condition(), tiny_backend.null_condition()
    assert a.is_null and torch.equal(a.embedding, b.embedding) and not a.embedding.any()


def test_cfg_combine_cases():
    u, c = torch.tensor([1.0, 2.0]), torch.tensor([3.0, 0.0])
    assert torch.equal(cfg_combine(u, c, 1.0), c)
    assert torch.equal(cfg_combine(u, c, 0.0), u)
    assert torch.allclose(cfg_combine(u, c, 7.5), torch.tensor([16.0, -13.0]))


def test_guided_noise_equals_manual_combination(tiny_backend):
    z = torch.randn(4, 16, 16, dtype=torch.float64)
    null, cond = tiny_backend.null_condition(), tiny_backend.encode_text(ToyScene(color="green"))
    want = cfg_combine(tiny_backend.predict_noise(z, 300, null), tiny_backend.predict_noise(z, 300, cond), 7.5)
    assert torch.allclose(guided_noise(tiny_backend, z, 300, cond, null, 7.5), want, atol=1e-12)


def test_denoiser_differentiable_in_clones_by_central_differences():
    backend = make_tiny_backend(3)
    site = backend.sites[5]
    site.reset_clones(trainable=("k",))

    class Target(IdentityControl):
        def __call__(self, s, x):
            return s.vanilla(x, target=True)

    z = torch.randn(4, 16, 16, dtype=torch.float64)
    cond = backend.encode_text(ToyScene())

    def f():
        return backend.predict_noise(z, 200, cond, Target({5})).square().sum()

    (g,) = torch.autograd.grad(f(), [site.k_t])
    idx = (3, 1)
    h = 1e-6
    with torch.no_grad():
        site.k_t[idx] += h
        up = f().item()
        site.k_t[idx] -= 2 * h
        down = f().item()
    assert (up - down) / (2 * h) == pytest.approx(g[idx].item(), rel=1e-5)


def test_linear_denoiser_has_no_sites():
    b = LinearDenoiser(torch.eye(8, dtype=torch.float64), (2, 2, 2))
    z = torch.randn(2, 2, 2, dtype=torch.float64)
    assert b.sites == [] and torch.equal(b.predict_noise(z, 0), z)


def test_codec_round_trip():
    codec = ToyCodec()
    img = torch.tensor(render(ToyScene(background="textured"), 2))
    z = codec.encode(img)
    assert z.shape == (4, 16, 16)
    assert torch.allclose(codec.decode(z), img, atol=1e-6)


def test_short_training_reduces_loss_and_is_seeded():
    images, tokens = toy_training_set(1, 0)
    sched = NoiseSchedule()
    cfg = DenoiserTrainConfig(steps=60, batch_size=16, log_every=20, seed=4)
    a = train_toy_denoiser(images, tokens, sched, cfg, TINY_ARCH)
    b = train_toy_denoiser(images, tokens, sched, cfg, TINY_ARCH)
    assert a.loss_curve == b.loss_curve
    assert state_checksum(a.model) == state_checksum(b.model)
    assert a.loss_curve[-1][1] < a.loss_curve[0][1]


def test_empty_training_set_rejected():
    with pytest.raises(InvalidArgument):
        train_toy_denoiser(torch.zeros(0, 3, 16, 16), torch.zeros(0, 5, dtype=torch.long), NoiseSchedule())


def test_checkpoint_round_trip(tmp_path):
    images, tokens = toy_training_set(1, 0)
    ck = train_toy_denoiser(images[:32], tokens[:32], NoiseSchedule(), DenoiserTrainConfig(steps=3, batch_size=4),
                            TINY_ARCH)
    path = tmp_path / "den.pt"
    save_checkpoint(path, ck.model, "denoiser", ck.model.arch, ck.schedule, ck.loss_curve)
    back = load_denoiser(path)
    z = torch.randn(2, 4, 16, 16)
    with torch.no_grad():
        assert torch.equal(ck.model(z, torch.tensor([5, 900]), ck.model.embed_tokens(tokens[:2])),
                           back.model(z, torch.tensor([5, 900]), back.model.embed_tokens(tokens[:2])))
    assert back.loss_curve == [list(x) if isinstance(x, list) else x for x in ck.loss_curve]
    assert back.schedule == ck.schedule


def test_checkpoint_kind_and_garbage_rejected(tmp_path):
    path = tmp_path / "junk.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigurationError):
        load_denoiser(path)
    with pytest.raises(ConfigurationError):
        load_denoiser(tmp_path / "missing.pt")


# ---------------------------------------------------------------- trained model


def heldout_batch(seed=77):
    scenes = all_scenes()
    imgs = torch.tensor(np.stack([render(s, 10_000 + seed + i) for i, s in enumerate(scenes)]))
    toks = torch.tensor([s.tokens() for s in scenes])
    return ToyCodec().encode(imgs), toks


def test_trained_beats_untrained_by_half(trained_denoiser):
    latents, toks = heldout_batch()
    sched = trained_denoiser.schedule
    with torch.random.fork_rng():
        torch.manual_seed(0)
        fresh = ToyDenoiser(trained_denoiser.model.arch).eval()
    with torch.no_grad():
        trained = evaluation_error(trained_denoiser.model, latents, toks, sched)
        untrained = evaluation_error(fresh, latents, toks, sched)
    assert trained <= 0.5 * untrained


def test_trained_noisiest_step_near_identity_floor(trained_denoiser):
    """At t=999 almost all signal is gone; the best predictor is ~ z_t itself."""
    latents, toks = heldout_batch(5)
    sched = trained_denoiser.schedule
    t = torch.full((len(latents),), 999)
    with torch.no_grad():
        err = evaluation_error(trained_denoiser.model, latents, toks, sched, timesteps=t)
    ab = sched.alphas_cumprod[999]
    # error of the identity estimate eps_hat = z_t: (sqrt(ab) z0 + (sqrt(1-ab)-1) eps)^2
    floor = ab * latents.square().mean().item() + (np.sqrt(1 - ab) - 1) ** 2
    assert err <= max(2 * floor, 1e-3)
