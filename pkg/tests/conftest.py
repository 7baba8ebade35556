import hashlib

import pytest
import torch
from hypothesis import settings

from dualedit.denoiser import ToyCodec, ToyDenoiser, ToyDenoiserArch
from dualedit.embedder import EmbedderArch, ToyEmbedder
from dualedit.schedule import NoiseSchedule
from dualedit.toydata import ToyScene, render

settings.register_profile("default", deadline=None)
settings.load_profile("default")

TINY_ARCH = ToyDenoiserArch(base=8, mid=16, ctx_dim=8, temb_dim=16, heads=2)


def make_tiny_backend(seed=0, dtype=torch.float64):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        m = ToyDenoiser(TINY_ARCH)
    return m.to(dtype).eval().freeze()


def make_tiny_embedder(seed=0, dtype=torch.float64):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        e = ToyEmbedder(EmbedderArch(dim=16, feat_dim=8, width=8))
    return e.to(dtype).eval().requires_grad_(False)


@pytest.fixture
def tiny_backend():
    return make_tiny_backend()


@pytest.fixture
def tiny_embedder():
    return make_tiny_embedder()


@pytest.fixture
def short_schedule():
    return NoiseSchedule(num_inference_steps=6)


@pytest.fixture
def codec():
    return ToyCodec()


@pytest.fixture
def source_latent(codec):
    return codec.encode(torch.tensor(render(ToyScene(color="red"), 0), dtype=torch.float64))


def state_checksum(module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _bundled(name):
    from dualedit.pipeline import BUNDLED_CHECKPOINTS

    path = BUNDLED_CHECKPOINTS / name
    if not path.exists():
        pytest.fail(f"{path} missing; run scripts/train_toy_models.py")
    return path


@pytest.fixture(scope="session")
def trained_denoiser():
    from dualedit.denoiser import load_denoiser

    return load_denoiser(_bundled("denoiser.pt"))


@pytest.fixture(scope="session")
def trained_embedder():
    from dualedit.embedder import load_embedder

    return load_embedder(_bundled("embedder.pt"))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
