"""Random-gateway guidance: backpropagate an embedder loss through a sampling
loop while keeping denoiser graphs only at a few gateway steps."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from .attention import ShareConfig, SourceFeatureCache, install_share_hooks
from .denoiser import guided_noise
from .errors import InvalidArgument, OptimizationAborted, RolloutFailure
from .schedule import NoiseSchedule, step_coefficients_at


class GatewayStrategy(str, Enum):
    RANDOM = "random"
    FORMER_HALF = "former"
    LATTER_HALF = "latter"
    STRATIFIED_INTERVALS = "intervals"

    @classmethod
    def parse(cls, value) -> "GatewayStrategy":
        if isinstance(value, GatewayStrategy):
            return value
        v = str(value).lower()
        for s in cls:
            if v in (s.value, s.name.lower()):
                return s
        raise InvalidArgument(f"unknown gateway strategy {value!r}")


@dataclass(frozen=True)
class GatewaySchedule:
    steps: frozenset
    strategy: GatewayStrategy = GatewayStrategy.RANDOM
    rng_seed: int | None = None

    def __contains__(self, step) -> bool:
        return step in self.steps

    def __len__(self):
        return len(self.steps)


def _draw(rng, pool, n):
    return [int(s) for s in rng.choice(np.asarray(pool), size=n, replace=False)] if n else []


def select_gateways(strategy, S: int, n: int, rng=None) -> GatewaySchedule:
    """Draw ``n`` distinct gateway steps from 1..S (step 1 = noisiest).

    A half strategy asked for more steps than its half holds takes the whole
    half and fills up uniformly from the other one.
    """
    strategy = GatewayStrategy.parse(strategy)
    if n < 0 or n > S:
        raise InvalidArgument(f"cannot pick {n} gateways from {S} steps")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    steps = np.arange(1, S + 1)
    half = S // 2
    if strategy is GatewayStrategy.RANDOM:
        chosen = _draw(rng, steps, n)
    elif strategy in (GatewayStrategy.FORMER_HALF, GatewayStrategy.LATTER_HALF):
        pref, rest = (steps[:half], steps[half:]) if strategy is GatewayStrategy.FORMER_HALF else (steps[half:], steps[:half])
        if n <= len(pref):
            chosen = _draw(rng, pref, n)
        else:
            chosen = [int(s) for s in pref] + _draw(rng, rest, n - len(pref))
    else:
        edges = [k * S // n for k in range(n + 1)] if n else [0]
        chosen = [int(rng.integers(edges[k], edges[k + 1])) + 1 for k in range(n)]
    return GatewaySchedule(frozenset(chosen), strategy, seed)


@dataclass
class RolloutStats:
    retained_graphs: int = 0
    forward_calls: int = 0
    saved_bytes: int = 0
    wall_clock: float = 0.0


def sample_with_gateways(z_T, target_cond, hooks, gw: GatewaySchedule, backend, sched: NoiseSchedule,
                         null=None, cfg_scale: float | None = 7.5, stats: RolloutStats | None = None):
    """DDIM rollout where only gateway steps keep the noise-term graph.

    Non-gateway noise predictions run without autograd, which equals applying
    stop-gradient to k2*eps; the k1*z chain stays differentiable throughout.
    ``stats.saved_bytes`` sums the tensors autograd saves during the rollout.
    """
    stats = stats if stats is not None else RolloutStats()
    null = null if null is not None else backend.null_condition()
    t0 = time.perf_counter()

    def pack(tensor):
        stats.saved_bytes += tensor.numel() * tensor.element_size()
        return tensor

    z = z_T
    with torch.autograd.graph.saved_tensors_hooks(pack, lambda tensor: tensor):
        for step in range(1, sched.S + 1):
            coeffs = step_coefficients_at(step, sched)
            t, _ = sched.step_timesteps(step)
            if hooks is not None:
                hooks.step = step
            try:
                if step in gw.steps:
                    eps = guided_noise(backend, z, t, target_cond, null, cfg_scale, hooks)
                    stats.retained_graphs += 1
                else:
                    with torch.no_grad():
                        eps = guided_noise(backend, z, t, target_cond, null, cfg_scale, hooks)
            except (MemoryError, RuntimeError) as exc:
                if isinstance(exc, MemoryError) or "out of memory" in str(exc):
                    raise RolloutFailure(f"out of memory at step {step} with {stats.retained_graphs} "
                                         "retained denoiser graphs", step, stats.retained_graphs) from exc
                raise
            stats.forward_calls += 1
            z = coeffs.k1 * z + coeffs.k2 * eps
            if not torch.isfinite(z.detach()).all():
                raise RolloutFailure(f"non-finite latent at step {step}", step, stats.retained_graphs)
    stats.wall_clock += time.perf_counter() - t0
    return z


def clip_loss(image_emb, text_emb):
    return 1.0 - F.cosine_similarity(image_emb, text_emb, dim=-1)


def reg_loss(z0_t, z0_s, reduction: str = "sum"):
    sq = (z0_t - z0_s) ** 2
    if reduction == "sum":
        return sq.sum()
    if reduction == "mean":
        return sq.mean()
    raise InvalidArgument(f"unknown reduction {reduction!r}")


@dataclass
class OptimizationConfig:
    loops: int = 3
    gateways: int = 5
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    lam: float = 1.0
    cfg_scale: float | None = 7.5
    strategy: GatewayStrategy = GatewayStrategy.RANDOM
    seed: int = 0
    reg_reduction: str = "mean"

    def __post_init__(self):
        self.strategy = GatewayStrategy.parse(self.strategy)
        self.betas = tuple(self.betas)
        if self.loops < 0:
            raise InvalidArgument("loops must be non-negative")
        if self.lam < 0:
            raise InvalidArgument(f"lambda must be non-negative, got {self.lam}")
        if self.lam > 10:
            raise InvalidArgument(f"lambda must be at most 10, got {self.lam}")
        if self.gateways < 0:
            raise InvalidArgument("gateways must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossBreakdown:
    loop_index: int
    l_clip: float
    l_reg: float
    total: float
    gateways: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {"loop": self.loop_index, "gateways": self.gateways,
                "l_clip": self.l_clip, "l_reg": self.l_reg, "total": self.total}


@dataclass
class EditResult:
    final_latent: torch.Tensor
    final_image: torch.Tensor
    # images[k] is the decoded edit after k parameter updates; images[0] is the direct edit
    images: list
    history: list
    stats: list


def trainable_parameters(backend) -> list:
    return [w for s in backend.sites for w in s.clones().values() if w is not None and w.requires_grad]


def optimize_edit(traj, cache: SourceFeatureCache, share_cfg: ShareConfig, target_cond, opt_cfg: OptimizationConfig,
                  backend, sched: NoiseSchedule, codec, embedder, text_emb, null=None,
                  on_loop=None) -> EditResult:
    """Loop: draw gateways, roll out the editing branch, score, one Adam step.

    The editing-branch clones are reset to the frozen weights and the mode's
    projections made trainable before the first loop.
    """
    if opt_cfg.lam < 0:
        raise InvalidArgument("lambda must be non-negative")
    share_cfg.validate(backend, sched.S)
    for site in backend.sites:
        site.reset_clones(trainable=share_cfg.mode.trainable)
    params = trainable_parameters(backend)
    if opt_cfg.loops > 0 and not params and backend.sites:
        raise InvalidArgument("no trainable parameters for this share mode")
    hooks = install_share_hooks(backend, share_cfg, cache)
    rng = np.random.default_rng(opt_cfg.seed)
    opt = torch.optim.Adam(params, lr=opt_cfg.lr, betas=opt_cfg.betas, weight_decay=0.0) if params else None
    text_emb = text_emb.detach()
    z0_s = cache.z0
    history, images, all_stats = [], [], []
    for loop in range(1, opt_cfg.loops + 1):
        gw = select_gateways(opt_cfg.strategy, sched.S, min(opt_cfg.gateways, sched.S), rng)
        stats = RolloutStats()
        z0 = sample_with_gateways(traj.z_T, target_cond, hooks, gw, backend, sched, null, opt_cfg.cfg_scale, stats)
        img = codec.decode(z0)
        l_clip = clip_loss(embedder.embed_image(img[None])[0], text_emb)
        l_reg = reg_loss(z0, z0_s, opt_cfg.reg_reduction)
        total = l_clip + opt_cfg.lam * l_reg
        rec = LossBreakdown(loop, l_clip.item(), l_reg.item(), total.item(), sorted(gw.steps))
        history.append(rec)
        if not torch.isfinite(total):
            raise OptimizationAborted(f"non-finite loss in loop {loop}", history)
        images.append(img.detach())
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            if total.requires_grad:
                total.backward()
            opt.step()
        all_stats.append(stats)
        if on_loop is not None:
            on_loop(rec, img.detach())
    with torch.no_grad():
        stats = RolloutStats()
        z_final = sample_with_gateways(traj.z_T, target_cond, hooks, GatewaySchedule(frozenset()), backend, sched,
                                       null, opt_cfg.cfg_scale, stats)
        final_img = codec.decode(z_final)
    all_stats.append(stats)
    images.append(final_img)
    return EditResult(z_final, final_img, images, history, all_stats)
