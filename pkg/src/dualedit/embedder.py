"""Toy contrastive text-image embedder and the two evaluation metrics."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument
from .toydata import FIELDS, VOCAB, ToyScene, all_scenes, render


@dataclass
class EmbedderArch:
    dim: int = 64
    feat_dim: int = 32
    width: int = 32


class ToyEmbedder(nn.Module):
    """CLIP stand-in: a small CNN over 16x16 RGB and a bag-of-fields text tower.

    The CNN's 4x4 output grid doubles as the patch features for the
    self-similarity metric.
    """

    def __init__(self, arch: EmbedderArch | None = None):
        super().__init__()
        self.arch = a = arch or EmbedderArch()
        self.cnn = nn.Sequential(
            nn.Conv2d(3, a.width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(a.width, a.width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(a.width, a.feat_dim, 3, stride=2, padding=1),
        )
        self.image_head = nn.Sequential(nn.SiLU(), nn.Linear(16 * a.feat_dim, 128), nn.SiLU(), nn.Linear(128, a.dim))
        self.token_embed = nn.ModuleList(nn.Embedding(len(VOCAB[f]), a.dim) for f in FIELDS)
        self.text_head = nn.Sequential(nn.SiLU(), nn.Linear(a.dim, a.dim))
        self.logit_scale = nn.Parameter(torch.tensor(math.log(10.0)))

    def patch_features(self, images):
        """[B, 3, 16, 16] in [0, 1] -> [B, 16, feat_dim]"""
        f = self.cnn(2.0 * images - 1.0)
        return f.flatten(2).transpose(1, 2)

    def embed_image(self, images):
        f = self.patch_features(images)
        return F.normalize(self.image_head(f.flatten(1)), dim=-1)

    def embed_tokens(self, tokens):
        h = sum(e(tokens[:, i]) for i, e in enumerate(self.token_embed))
        return F.normalize(self.text_head(h), dim=-1)

    def embed_text(self, caption):
        """Caption as a ToyScene, a caption string, or a [B, 5] token tensor."""
        if isinstance(caption, str):
            from .toydata import parse_caption

            caption = parse_caption(caption)
        if isinstance(caption, ToyScene):
            dev = self.logit_scale.device
            return self.embed_tokens(torch.tensor([caption.tokens()], device=dev))[0]
        return self.embed_tokens(caption)


def check_tokens(tokens) -> None:
    tokens = torch.as_tensor(tokens)
    if tokens.dim() != 2 or tokens.shape[1] != len(FIELDS):
        raise InvalidArgument(f"captions must be [N, {len(FIELDS)}] token rows")
    for i, f in enumerate(FIELDS):
        col = tokens[:, i]
        if (col < 0).any() or (col >= len(VOCAB[f])).any():
            raise InvalidArgument(f"caption token outside the {f} vocabulary")


@dataclass
class EmbedderTrainConfig:
    steps: int = 1500
    batch_size: int = 48
    lr: float = 2e-3
    seed: int = 0
    renders_per_scene: int = 6
    noise_aug: float = 0.08


@dataclass
class EmbedderCheckpoint:
    model: ToyEmbedder
    heldout_accuracy: float
    loss_curve: list = field(default_factory=list)


def embedder_dataset(renders_per_scene: int, seed: int = 0, scenes=None):
    scenes = scenes if scenes is not None else all_scenes()
    imgs, toks, ids = [], [], []
    for i, sc in enumerate(scenes):
        for r in range(renders_per_scene):
            imgs.append(render(sc, 7919 * seed + 104729 * r + i))
            toks.append(sc.tokens())
            ids.append(i)
    return torch.tensor(np.stack(imgs)), torch.tensor(toks, dtype=torch.long), torch.tensor(ids)


def contrastive_loss(img_emb, txt_emb, logit_scale):
    logits = logit_scale.exp() * img_emb @ txt_emb.T
    labels = torch.arange(len(img_emb))
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


@torch.no_grad()
def retrieval_accuracy(model: ToyEmbedder, images, tokens, ids) -> float:
    """Caption -> image top-1: for each distinct caption, is the best-scoring image one of its renders?"""
    img = model.embed_image(images)
    uniq, first = np.unique(ids.numpy(), return_index=True)
    txt = model.embed_tokens(tokens[first])
    best = (txt @ img.T).argmax(dim=1)
    return float((ids[best].numpy() == uniq).mean())


def train_toy_embedder(images, tokens, ids, cfg: EmbedderTrainConfig | None = None,
                       heldout=None, arch: EmbedderArch | None = None) -> EmbedderCheckpoint:
    """Symmetric InfoNCE over batches of distinct scenes.

    ``ids`` groups renders of the same scene so a batch never holds two
    positives for one caption.
    """
    cfg = cfg or EmbedderTrainConfig()
    check_tokens(tokens)
    if len(images) == 0:
        raise InvalidArgument("empty training set")
    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = ToyEmbedder(arch)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=cfg.lr * 0.05)
    by_scene = {}
    for row, sid in enumerate(ids.tolist()):
        by_scene.setdefault(sid, []).append(row)
    scene_ids = sorted(by_scene)
    curve = []
    for step in range(cfg.steps):
        pick = torch.randperm(len(scene_ids), generator=gen)[: cfg.batch_size].tolist()
        rows = [by_scene[scene_ids[p]][int(torch.randint(len(by_scene[scene_ids[p]]), (1,), generator=gen))]
                for p in pick]
        x = images[rows]
        sigma = cfg.noise_aug * torch.rand(len(rows), 1, 1, 1, generator=gen)
        x = x + sigma * torch.randn(x.shape, generator=gen)
        x = x + 0.05 * (torch.rand(len(rows), 1, 1, 1, generator=gen) - 0.5)
        loss = contrastive_loss(model.embed_image(x), model.embed_tokens(tokens[rows]), model.logit_scale)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 50 == 0 or step == cfg.steps - 1:
            curve.append((step + 1, loss.item()))
    model.eval()
    acc = retrieval_accuracy(model, *heldout) if heldout is not None else float("nan")
    return EmbedderCheckpoint(model, acc, curve)


# ---------------------------------------------------------------- metrics


def _batch(image):
    image = torch.as_tensor(image, dtype=torch.float32) if not isinstance(image, torch.Tensor) else image
    return image[None] if image.dim() == 3 else image


def alignment_score(image, caption, embedder) -> float:
    """100 * cosine between image and caption embeddings."""
    with torch.no_grad():
        img = embedder.embed_image(_batch(image).to(embedder.logit_scale.dtype))[0]
        txt = embedder.embed_text(caption)
        return float(100.0 * F.cosine_similarity(img, txt, dim=-1))


def gram_matrix(patch_feats):
    f = F.normalize(patch_feats, dim=-1)
    return f @ f.transpose(-1, -2)


def self_similarity_distance(image_a, image_b, embedder) -> float:
    with torch.no_grad():
        dt = embedder.logit_scale.dtype
        ga = gram_matrix(embedder.patch_features(_batch(image_a).to(dt)))[0]
        gb = gram_matrix(embedder.patch_features(_batch(image_b).to(dt)))[0]
        return float(torch.linalg.matrix_norm(ga - gb, ord="fro"))


def save_embedder(path, ck: EmbedderCheckpoint) -> None:
    from .denoiser import save_checkpoint

    save_checkpoint(path, ck.model, "embedder", ck.model.arch, loss_curve=ck.loss_curve,
                    extra={"heldout_accuracy": ck.heldout_accuracy})


def load_embedder(path) -> EmbedderCheckpoint:
    from .denoiser import read_checkpoint

    blob = read_checkpoint(path, "embedder")
    model = ToyEmbedder(EmbedderArch(**blob["arch"]))
    model.load_state_dict(blob["state_dict"])
    model.eval().requires_grad_(False)
    return EmbedderCheckpoint(model, blob["extra"].get("heldout_accuracy", float("nan")), blob["loss_curve"])
