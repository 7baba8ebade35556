"""Noise-prediction backends with hookable self-attention sites.

A backend exposes ``sites`` (a stable list of :class:`SelfAttentionSite`) and
``predict_noise(z, t, cond, attn_control=None)``.  An attention control is any
object with a ``layers`` attribute (the site indices it intercepts) that is
callable as ``control(site, x) -> attention output``.
"""
from __future__ import annotations

import copy
import math
import pickle
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidArgument, TrainingFailure
from .schedule import NoiseSchedule, forward_noise
from .toydata import FIELDS, VOCAB, ToyScene

class NoiseBackend(Protocol):
    """What the editing pipeline needs from a denoiser; a larger pretrained model plugs in here."""

    sites: list

    def predict_noise(self, z, t, cond, attn_control=None): ...

    def null_condition(self) -> "TextCondition": ...


CHECKPOINT_FORMAT = "dualedit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TextCondition:
    embedding: torch.Tensor  # [tokens, dim]
    is_null: bool = False


def attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two dims."""
    d = q.shape[-1]
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    return w @ v


def attention_weights(q, k):
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


class SelfAttentionSite(nn.Module):
    """One self-attention projection site.

    ``W_q``/``W_k``/``W_v`` are the pretrained matrices; ``q_t``/``k_t``/``v_t``
    are editing-branch clones (plain tensors, not registered parameters) created
    by :meth:`reset_clones`.
    """

    def __init__(self, layer_index: int, dim: int, head_count: int = 2):
        super().__init__()
        if dim % head_count:
            raise InvalidArgument("dim must be divisible by head_count")
        self.layer_index = layer_index
        self.dim = dim
        self.head_count = head_count
        self.key_dim = dim // head_count
        self.W_q = nn.Parameter(torch.randn(dim, dim) / math.sqrt(dim))
        self.W_k = nn.Parameter(torch.randn(dim, dim) / math.sqrt(dim))
        self.W_v = nn.Parameter(torch.randn(dim, dim) / math.sqrt(dim))
        self.q_t = self.k_t = self.v_t = None

    def reset_clones(self, trainable=()):
        for name in ("q", "k", "v"):
            w = getattr(self, f"W_{name}").detach().clone()
            w.requires_grad_(name in trainable)
            setattr(self, f"{name}_t", w)

    def clones(self) -> dict:
        return {"q": self.q_t, "k": self.k_t, "v": self.v_t}

    def _heads(self, y):
        B, N, _ = y.shape
        return y.view(B, N, self.head_count, self.key_dim).transpose(1, 2)

    def project(self, x, name: str, target: bool = False):
        """Project hidden states [B, N, C] to one of q/k/v as [B, heads, N, d]."""
        W = getattr(self, f"{name}_t") if target else getattr(self, f"W_{name}")
        if W is None:
            raise ConfigurationError(f"site {self.layer_index}: clones not initialised")
        return self._heads(x @ W.T)

    def vanilla(self, x, target: bool = False):
        return attention(self.project(x, "q", target), self.project(x, "k", target), self.project(x, "v", target))

    def merge(self, out):
        B, H, N, d = out.shape
        return out.transpose(1, 2).reshape(B, N, H * d)

    def forward(self, x, control=None):
        if control is not None and self.layer_index in control.layers:
            out = control(self, x)
        else:
            out = self.vanilla(x)
        return self.merge(out)


def check_control(backend, control):
    if control is None:
        return
    known = {s.layer_index for s in backend.sites}
    unknown = set(control.layers) - known
    if unknown:
        raise ConfigurationError(f"attention hooks reference unknown sites {sorted(unknown)}")


class IdentityControl:
    """Intercepts every listed site and runs vanilla frozen attention."""

    def __init__(self, layers):
        self.layers = frozenset(layers)
        self.step = 0

    def __call__(self, site, x):
        return site.vanilla(x)


def cfg_combine(eps_uncond, eps_cond, scale: float):
    return eps_uncond + scale * (eps_cond - eps_uncond)


# ---------------------------------------------------------------- toy network


def timestep_embedding(t, dim: int):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    def __init__(self, dim, ctx_dim, heads):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, dim, bias=False)

    def forward(self, x, ctx):
        B, N, C = x.shape
        h = self.heads

        def split(y):
            return y.view(B, -1, h, C // h).transpose(1, 2)

        out = attention(split(self.to_q(x)), split(self.to_k(ctx)), split(self.to_v(ctx)))
        return out.transpose(1, 2).reshape(B, N, C)


class AttnBlock(nn.Module):
    def __init__(self, dim, ctx_dim, layer_index, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.site = SelfAttentionSite(layer_index, dim, heads)
        self.proj_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.cross = CrossAttention(dim, ctx_dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x, ctx, control):
        B, C, H, W = x.shape
        h = x.flatten(2).transpose(1, 2)
        h = h + self.proj_out(self.site(self.norm1(h), control))
        h = h + self.cross(self.norm2(h), ctx)
        h = h + self.mlp(self.norm3(h))
        return h.transpose(1, 2).reshape(B, C, H, W)


@dataclass
class ToyDenoiserArch:
    latent_channels: int = 4
    base: int = 32
    mid: int = 64
    ctx_dim: int = 32
    temb_dim: int = 64
    heads: int = 2


class ToyDenoiser(nn.Module):
    """Tiny conditional U-Net over [4, 16, 16] latents with 8 self-attention sites.

    Sites 0-1 sit on the encoder, 2-3 in the middle, 4-7 on the decoder; the
    enumeration order is the order of execution.
    """

    def __init__(self, arch: ToyDenoiserArch | None = None):
        super().__init__()
        self.arch = a = arch or ToyDenoiserArch()
        self.token_embed = nn.ModuleList(nn.Embedding(len(VOCAB[f]), a.ctx_dim) for f in FIELDS)
        self.temb = nn.Sequential(nn.Linear(a.temb_dim, a.temb_dim), nn.SiLU(), nn.Linear(a.temb_dim, a.temb_dim))
        T = a.temb_dim
        self.conv_in = nn.Conv2d(a.latent_channels, a.base, 3, padding=1)
        self.res16 = ResBlock(a.base, a.base, T)
        self.down8 = nn.Conv2d(a.base, a.mid, 3, stride=2, padding=1)
        self.res8 = ResBlock(a.mid, a.mid, T)
        self.attn8 = AttnBlock(a.mid, a.ctx_dim, 0, a.heads)
        self.down4 = nn.Conv2d(a.mid, a.mid, 3, stride=2, padding=1)
        self.res4 = ResBlock(a.mid, a.mid, T)
        self.attn4 = AttnBlock(a.mid, a.ctx_dim, 1, a.heads)
        self.mid_res = ResBlock(a.mid, a.mid, T)
        self.mid_attn1 = AttnBlock(a.mid, a.ctx_dim, 2, a.heads)
        self.mid_attn2 = AttnBlock(a.mid, a.ctx_dim, 3, a.heads)
        self.up4_res = ResBlock(2 * a.mid, a.mid, T)
        self.up4_attn1 = AttnBlock(a.mid, a.ctx_dim, 4, a.heads)
        self.up4_attn2 = AttnBlock(a.mid, a.ctx_dim, 5, a.heads)
        self.up8_res = ResBlock(2 * a.mid, a.mid, T)
        self.up8_attn1 = AttnBlock(a.mid, a.ctx_dim, 6, a.heads)
        self.up8_attn2 = AttnBlock(a.mid, a.ctx_dim, 7, a.heads)
        self.up16_res = ResBlock(a.mid + a.base, a.base, T)
        self.up16_res2 = ResBlock(a.base, a.base, T)
        self.norm_out = nn.GroupNorm(8, a.base)
        self.conv_out = nn.Conv2d(a.base, a.latent_channels, 3, padding=1)
        self.sites = [m.site for m in (self.attn8, self.attn4, self.mid_attn1, self.mid_attn2,
                                       self.up4_attn1, self.up4_attn2, self.up8_attn1, self.up8_attn2)]

    # -- text conditioning
    def encode_text(self, scene: ToyScene) -> TextCondition:
        dev = self.conv_in.weight.device
        toks = [torch.tensor(i, device=dev) for i in scene.tokens()]
        with torch.no_grad():
            emb = torch.stack([e(tok) for e, tok in zip(self.token_embed, toks)])
        return TextCondition(emb.to(self.conv_in.weight.dtype), False)

    def null_condition(self) -> TextCondition:
        w = self.conv_in.weight
        return TextCondition(torch.zeros(len(FIELDS), self.arch.ctx_dim, dtype=w.dtype, device=w.device), True)

    def embed_tokens(self, tokens):
        """tokens: long [B, 5] -> [B, 5, ctx_dim]"""
        return torch.stack([e(tokens[:, i]) for i, e in enumerate(self.token_embed)], dim=1)

    def forward(self, z, t, ctx, control=None):
        temb = self.temb(timestep_embedding(t, self.arch.temb_dim).to(z.dtype))
        h16 = self.res16(self.conv_in(z), temb)
        h8 = self.attn8(self.res8(self.down8(h16), temb), ctx, control)
        h4 = self.attn4(self.res4(self.down4(h8), temb), ctx, control)
        m = self.mid_attn2(self.mid_attn1(self.mid_res(h4, temb), ctx, control), ctx, control)
        u4 = self.up4_res(torch.cat([m, h4], 1), temb)
        u4 = self.up4_attn2(self.up4_attn1(u4, ctx, control), ctx, control)
        u8 = F.interpolate(u4, scale_factor=2, mode="nearest")
        u8 = self.up8_res(torch.cat([u8, h8], 1), temb)
        u8 = self.up8_attn2(self.up8_attn1(u8, ctx, control), ctx, control)
        u16 = F.interpolate(u8, scale_factor=2, mode="nearest")
        u16 = self.up16_res2(self.up16_res(torch.cat([u16, h16], 1), temb), temb)
        return self.conv_out(F.silu(self.norm_out(u16)))

    def predict_noise(self, z, t, cond, attn_control=None):
        check_control(self, attn_control)
        squeeze = z.dim() == 3
        if squeeze:
            z = z[None]
        ctx = stack_conditions(cond, z.shape[0])
        tt = torch.full((z.shape[0],), int(t), dtype=torch.long, device=z.device)
        eps = self(z, tt, ctx, attn_control)
        return eps[0] if squeeze else eps

    def freeze(self):
        self.requires_grad_(False)
        for s in self.sites:
            s.reset_clones()
        return self


def stack_conditions(cond, batch: int):
    if isinstance(cond, TextCondition):
        return cond.embedding[None].expand(batch, *cond.embedding.shape)
    if isinstance(cond, (list, tuple)):
        if len(cond) != batch:
            raise InvalidArgument("one condition per batch element required")
        return torch.stack([c.embedding for c in cond])
    return cond


class LinearDenoiser(nn.Module):
    """eps(z) = A z on the flattened latent; a backend with no attention sites."""

    def __init__(self, A: torch.Tensor, shape):
        super().__init__()
        self.A = nn.Parameter(A.clone())
        self.shape = tuple(shape)
        self.sites = []

    def predict_noise(self, z, t, cond=None, attn_control=None):
        check_control(self, attn_control)
        return (self.A @ z.reshape(-1)).reshape(z.shape)

    def null_condition(self):
        return TextCondition(torch.zeros(1, 1, dtype=self.A.dtype), True)


def guided_noise(backend, z, t, cond, null, scale, control=None):
    """Classifier-free guided prediction for one latent [C, H, W].

    Conditional and unconditional passes are batched into a single forward
    call.  When ``cond`` is the null prompt, or guidance is off
    (``scale is None``), a single unbatched call is made; the combination
    would be the identity there anyway.
    """
    if scale is None or cond.is_null:
        return backend.predict_noise(z, t, cond, control)
    eps = backend.predict_noise(torch.stack([z, z]), t, [null, cond], control)
    return cfg_combine(eps[0], eps[1], scale)


# ---------------------------------------------------------------- codec


class ToyCodec:
    """Fixed affine codec: RGB in [0, 1] <-> latent in [-1, 1] plus a luminance channel."""

    latent_channels = 4

    def encode(self, img):
        img = torch.as_tensor(img)
        x = 2.0 * img - 1.0
        return torch.cat([x, x.mean(dim=-3, keepdim=True)], dim=-3)

    def decode(self, z):
        return (z[..., :3, :, :] + 1.0) / 2.0


# ---------------------------------------------------------------- training


@dataclass
class DenoiserTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    p_uncond: float = 0.15
    seed: int = 0
    renders_per_scene: int = 4
    log_every: int = 100


@dataclass
class DenoiserCheckpoint:
    model: ToyDenoiser
    schedule: NoiseSchedule
    loss_curve: list = field(default_factory=list)


def toy_training_set(renders_per_scene: int, seed: int = 0):
    from .toydata import all_scenes, render

    scenes = all_scenes()
    imgs, toks = [], []
    for i, sc in enumerate(scenes):
        for r in range(renders_per_scene):
            imgs.append(render(sc, seed * 100003 + i * 31 + r))
            toks.append(sc.tokens())
    return torch.tensor(np.stack(imgs)), torch.tensor(toks, dtype=torch.long)


def train_toy_denoiser(images, tokens, sched: NoiseSchedule, cfg: DenoiserTrainConfig | None = None,
                       arch: ToyDenoiserArch | None = None, model: ToyDenoiser | None = None) -> DenoiserCheckpoint:
    """Minimise E||eps - eps_theta(x_t, t, c)||^2 with condition dropout."""
    cfg = cfg or DenoiserTrainConfig()
    if len(images) == 0:
        raise InvalidArgument("empty training set")
    codec = ToyCodec()
    latents = codec.encode(images).float()
    gen = torch.Generator().manual_seed(cfg.seed)
    if model is None:
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            model = ToyDenoiser(arch)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=cfg.lr * 0.05)
    abar = torch.tensor(sched.alphas_cumprod, dtype=torch.float32)
    curve, last_good = [], copy.deepcopy(model.state_dict())
    running = 0.0
    for step in range(cfg.steps):
        idx = torch.randint(len(latents), (cfg.batch_size,), generator=gen)
        z0, tok = latents[idx], tokens[idx]
        t = torch.randint(sched.num_train_steps, (len(idx),), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        zt = forward_noise(z0, abar[t], eps)
        ctx = model.embed_tokens(tok)
        drop = torch.rand(len(idx), generator=gen) < cfg.p_uncond
        ctx = torch.where(drop[:, None, None], torch.zeros_like(ctx), ctx)
        loss = F.mse_loss(model(zt, t, ctx), eps)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise TrainingFailure(f"loss diverged at step {step}",
                                  checkpoint=DenoiserCheckpoint(model.eval(), sched, curve))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched_lr.step()
        running += loss.item()
        if (step + 1) % cfg.log_every == 0 or step == 0:
            curve.append((step + 1, running / (1 if step == 0 else cfg.log_every)))
            running = 0.0
            last_good = copy.deepcopy(model.state_dict())
    model.eval()
    return DenoiserCheckpoint(model, sched, curve)


@torch.no_grad()
def evaluation_error(model, latents, tokens, sched: NoiseSchedule, seed: int = 1234, timesteps=None):
    """Mean squared noise-prediction error on a fixed noised batch."""
    gen = torch.Generator().manual_seed(seed)
    n = len(latents)
    t = torch.randint(sched.num_train_steps, (n,), generator=gen) if timesteps is None else timesteps
    eps = torch.randn(latents.shape, generator=gen)
    abar = torch.tensor(sched.alphas_cumprod, dtype=torch.float32)
    zt = forward_noise(latents, abar[t], eps)
    pred = model(zt, t, model.embed_tokens(tokens))
    return F.mse_loss(pred, eps).item()


def save_checkpoint(path, model: nn.Module, kind: str, arch, schedule: NoiseSchedule | None = None,
                    loss_curve=None, extra=None) -> None:
    state = {k: v for k, v in model.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "arch": asdict(arch),
        "schedule": schedule.to_dict() if schedule is not None else None,
        "schedule_id": schedule.schedule_id if schedule is not None else None,
        "state_dict": state,
        "loss_curve": list(loss_curve or []),
        "extra": extra or {},
    }, path)


def read_checkpoint(path, kind: str) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT}")
    if blob.get("kind") != kind:
        raise ConfigurationError(f"{path}: expected a {kind} checkpoint, found {blob.get('kind')}")
    return blob


def load_denoiser(path) -> DenoiserCheckpoint:
    blob = read_checkpoint(path, "denoiser")
    model = ToyDenoiser(ToyDenoiserArch(**blob["arch"]))
    model.load_state_dict(blob["state_dict"])
    model.eval().freeze()
    return DenoiserCheckpoint(model, NoiseSchedule.from_dict(blob["schedule"]), blob["loss_curve"])
