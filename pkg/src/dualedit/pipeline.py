"""End-to-end wiring: run configs, single edits, the benchmark and gateway profiling."""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attention import ShareConfig, ShareMode, default_shared_layers
from .denoiser import ToyCodec, load_denoiser
from .embedder import alignment_score, load_embedder, self_similarity_distance
from .errors import ConfigurationError, InvalidArgument
from .gateway import (GatewayStrategy, OptimizationConfig, RolloutStats, clip_loss, optimize_edit, reg_loss,
                      sample_with_gateways, select_gateways)
from .imageio import load_image, save_image
from .inversion import invert, reconstruct_with_substitution
from .schedule import NoiseSchedule
from .toydata import TASK_MODE, TASKS, EditTriplet, ToyScene, load_benchmark, parse_caption

log = logging.getLogger(__name__)

# trained toy models shipped with the package, used when a config names none
BUNDLED_CHECKPOINTS = Path(__file__).parent / "checkpoints"

# learning rate and reconstruction strength per task; ranges resolved to their lower end
TASK_DEFAULTS = {
    "attribute": {"lr": 1e-4, "lam": 1.0},
    "replacement": {"lr": 5e-4, "lam": 0.5},
    "style": {"lr": 1e-4, "lam": 0.0},
    "pose": {"lr": 1e-3, "lam": 1.0},
    "shape": {"lr": 5e-4, "lam": 0.5},
}
TASK_RANGES = {
    "style": {"lam": (0.0, 1.0)},
    "pose": {"lam": (1.0, 10.0)},
    "shape": {"lr": (5e-4, 1e-3), "lam": (0.5, 1.0)},
}
GROUPS = {"structure": ("replacement", "attribute", "style"), "nonrigid": ("pose", "shape")}


@dataclass
class RunConfig:
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    denoiser_ckpt: str | None = None
    embedder_ckpt: str | None = None
    task: str = "attribute"
    mode: ShareMode | None = None  # None: derived from the task
    shared_layers: tuple | None = None  # None: backend default
    step_window: tuple | None = (5, None)  # None end means S
    opt: OptimizationConfig = field(default_factory=OptimizationConfig)
    inversion_cfg_scale: float | None = 7.5
    seed: int = 0
    out_dir: str = "runs/edit"

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise InvalidArgument(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if self.mode is not None:
            self.mode = ShareMode.parse(self.mode)

    @classmethod
    def for_task(cls, task: str, **overrides) -> "RunConfig":
        # the run seed drives gateway draws, so ``seed`` stays on the run config
        opt_over = {k: overrides.pop(k) for k in list(overrides)
                    if k in OptimizationConfig.__dataclass_fields__ and k != "seed"}
        d = TASK_DEFAULTS[task]
        opt = OptimizationConfig(**{"lr": d["lr"], "lam": d["lam"], **opt_over})
        return cls(task=task, opt=opt, **overrides)

    @property
    def share_mode(self) -> ShareMode:
        return self.mode if self.mode is not None else ShareMode.parse(TASK_MODE[self.task])

    def share_config(self, backend) -> ShareConfig:
        S = self.schedule.S
        layers = frozenset(self.shared_layers) if self.shared_layers is not None else default_shared_layers(
            len(backend.sites))
        window = None
        if self.step_window is not None:
            lo, hi = self.step_window
            hi = S if hi is None else min(int(hi), S)
            window = (int(lo), hi) if int(lo) <= hi else None
        return ShareConfig(self.share_mode, layers, window)

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule.to_dict(),
            "models": {"denoiser": self.denoiser_ckpt, "embedder": self.embedder_ckpt},
            "task": self.task,
            "share": {"mode": self.share_mode.value,
                      "layers": sorted(self.shared_layers) if self.shared_layers is not None else None,
                      "step_window": list(self.step_window) if self.step_window is not None else None},
            "optimization": self.opt.to_dict(),
            "inversion_cfg_scale": self.inversion_cfg_scale,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    # -- INI round trip
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        s = self.schedule
        cp["schedule"] = {"num_train_steps": str(s.num_train_steps), "beta_start": repr(s.beta_start),
                          "beta_end": repr(s.beta_end), "S": str(s.S)}
        cp["models"] = {"denoiser": self.denoiser_ckpt or "", "embedder": self.embedder_ckpt or ""}
        cp["share"] = {
            "mode": self.mode.value if self.mode is not None else "auto",
            "layers": ",".join(map(str, sorted(self.shared_layers))) if self.shared_layers is not None else "default",
            "step_window": ("none" if self.step_window is None else
                            f"{self.step_window[0]},{'S' if self.step_window[1] is None else self.step_window[1]}"),
        }
        o = self.opt
        cp["optimization"] = {
            "task": self.task, "loops": str(o.loops), "gateways": str(o.gateways), "lr": repr(o.lr),
            "beta1": repr(o.betas[0]), "beta2": repr(o.betas[1]), "lambda": repr(o.lam),
            "cfg_scale": "off" if o.cfg_scale is None else repr(o.cfg_scale),
            "strategy": o.strategy.value, "reg_reduction": o.reg_reduction,
        }
        cp["inversion"] = {"cfg_scale": "off" if self.inversion_cfg_scale is None else repr(self.inversion_cfg_scale)}
        cp["run"] = {"seed": str(self.seed), "out": self.out_dir}
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc
        try:
            return cls._from_parser(cp)
        except (KeyError, ValueError) as exc:
            if isinstance(exc, InvalidArgument):
                raise
            raise ConfigurationError(f"bad config value: {exc}") from exc

    @classmethod
    def _from_parser(cls, cp) -> "RunConfig":
        def opt_float(v):
            return None if v.strip().lower() in ("off", "none", "") else float(v)

        sec = cp["schedule"] if cp.has_section("schedule") else {}
        sched = NoiseSchedule(int(sec.get("num_train_steps", 1000)), float(sec.get("beta_start", 1e-4)),
                              float(sec.get("beta_end", 0.02)), int(sec.get("S", 50)))
        models = cp["models"] if cp.has_section("models") else {}
        o = cp["optimization"] if cp.has_section("optimization") else {}
        task = o.get("task", "attribute")
        if task not in TASK_DEFAULTS:
            raise ConfigurationError(f"unknown task {task!r}")
        d = TASK_DEFAULTS[task]
        opt = OptimizationConfig(
            loops=int(o.get("loops", 3)), gateways=int(o.get("gateways", 5)), lr=float(o.get("lr", d["lr"])),
            betas=(float(o.get("beta1", 0.9)), float(o.get("beta2", 0.999))), lam=float(o.get("lambda", d["lam"])),
            cfg_scale=opt_float(o.get("cfg_scale", "7.5")), strategy=o.get("strategy", "random"),
            reg_reduction=o.get("reg_reduction", "mean"))
        sh = cp["share"] if cp.has_section("share") else {}
        mode = sh.get("mode", "auto")
        layers = sh.get("layers", "default")
        window = sh.get("step_window", "5,S")
        if window.strip().lower() == "none":
            step_window = None
        else:
            lo, hi = (p.strip() for p in window.split(","))
            step_window = (int(lo), None if hi.upper() == "S" else int(hi))
        inv = cp["inversion"] if cp.has_section("inversion") else {}
        run = cp["run"] if cp.has_section("run") else {}
        return cls(
            schedule=sched, denoiser_ckpt=models.get("denoiser") or None, embedder_ckpt=models.get("embedder") or None,
            task=task, mode=None if mode == "auto" else ShareMode.parse(mode),
            shared_layers=None if layers == "default" else tuple(int(x) for x in layers.split(",") if x.strip()),
            step_window=step_window, opt=opt, inversion_cfg_scale=opt_float(inv.get("cfg_scale", "7.5")),
            seed=int(run.get("seed", 0)), out_dir=run.get("out", "runs/edit"))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)


@dataclass
class Models:
    backend: object
    schedule: NoiseSchedule
    embedder: object
    codec: ToyCodec = field(default_factory=ToyCodec)

    @classmethod
    def load(cls, cfg: RunConfig, S: int | None = None) -> "Models":
        den_path = cfg.denoiser_ckpt or BUNDLED_CHECKPOINTS / "denoiser.pt"
        emb_path = cfg.embedder_ckpt or BUNDLED_CHECKPOINTS / "embedder.pt"
        den = load_denoiser(den_path)
        emb = load_embedder(emb_path)
        trained = den.schedule
        if (trained.num_train_steps, trained.beta_start, trained.beta_end) != (
                cfg.schedule.num_train_steps, cfg.schedule.beta_start, cfg.schedule.beta_end):
            raise ConfigurationError("config schedule differs from the one the denoiser was trained with")
        return cls(den.model, cfg.schedule, emb.model)


@dataclass
class EditOutcome:
    source_image: torch.Tensor
    target: ToyScene
    final_latent: torch.Tensor
    final_image: torch.Tensor
    images: list
    history: list
    recon_error: float
    retained_graphs: list
    saved_bytes: list
    wall_clock: dict
    alignment: float
    self_sim: float


def edit_image(models: Models, image, target: ToyScene, cfg: RunConfig) -> EditOutcome:
    """invert -> substituted reconstruction -> gateway-guided editing."""
    backend, sched, codec = models.backend, models.schedule, models.codec
    timings = {}
    t0 = time.perf_counter()
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    z0 = codec.encode(img)
    null = backend.null_condition()
    traj = invert(z0, null, backend, sched, cfg.inversion_cfg_scale, null)
    timings["inversion"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    share_cfg = cfg.share_config(backend)
    recon, cache = reconstruct_with_substitution(traj, share_cfg, backend, sched, null)
    timings["reconstruction"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    target_cond = backend.encode_text(target)
    text_emb = models.embedder.embed_text(target)
    opt = replace(cfg.opt, seed=cfg.seed)
    result = optimize_edit(traj, cache, share_cfg, target_cond, opt, backend, sched, codec, models.embedder,
                           text_emb, null)
    timings["optimization"] = time.perf_counter() - t0
    return EditOutcome(
        source_image=img, target=target, final_latent=result.final_latent, final_image=result.final_image,
        images=result.images, history=result.history,
        recon_error=float((recon - z0).abs().max()),
        retained_graphs=[s.retained_graphs for s in result.stats[:-1]],
        saved_bytes=[s.saved_bytes for s in result.stats[:-1]], wall_clock=timings,
        alignment=alignment_score(result.final_image, target, models.embedder),
        self_sim=self_similarity_distance(result.final_image, img, models.embedder),
    )


def version_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def latent_digest(z) -> str:
    return hashlib.sha256(z.detach().cpu().numpy().tobytes()).hexdigest()


def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_edit_outputs(outcome: EditOutcome, cfg: RunConfig, out_dir, source_path=None, target_caption=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_paths = []
    for k, img in enumerate(outcome.images):
        name = f"loop_{k}.ppm"
        save_image(out / name, img.detach().numpy())
        image_paths.append(name)
    save_image(out / "final.ppm", outcome.final_image.detach().numpy())
    np.save(out / "final_latent.npy", outcome.final_latent.detach().numpy())
    history = [h.to_record() for h in outcome.history]
    atomic_write(out / "loss_history.jsonl", "".join(json.dumps(r) + "\n" for r in history))
    (out / "config.ini").write_text(cfg.to_ini())
    manifest = {
        "config": cfg.to_dict(),
        "version": version_id(),
        "source_image": str(source_path) if source_path else None,
        "target_caption": target_caption or outcome.target.caption,
        "loss_history": history,
        "loop_images": image_paths,
        "final_image": "final.ppm",
        "final_latent": "final_latent.npy",
        "final_latent_sha256": latent_digest(outcome.final_latent),
        "metrics": {"alignment_score": outcome.alignment, "self_sim_distance": outcome.self_sim,
                    "task_category": cfg.task},
        "reconstruction_max_abs_error": outcome.recon_error,
        "counters": {"retained_graphs": outcome.retained_graphs, "saved_bytes": outcome.saved_bytes},
        "wall_clock": outcome.wall_clock,
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2))
    return manifest


def strip_timing(manifest: dict) -> dict:
    return {k: v for k, v in manifest.items() if k != "wall_clock"}


def run_edit(image_path, target_caption: str, cfg: RunConfig, models: Models | None = None) -> dict:
    target = parse_caption(target_caption)
    image = load_image(image_path)
    models = models or Models.load(cfg)
    outcome = edit_image(models, image, target, cfg)
    return write_edit_outputs(outcome, cfg, cfg.out_dir, image_path, target_caption)


# ---------------------------------------------------------------- benchmark


def case_config(base: RunConfig, category: str, strategy=None, keep_overrides: dict | None = None) -> RunConfig:
    over = dict(TASK_DEFAULTS[category])
    over.update(keep_overrides or {})
    opt = replace(base.opt, lr=over["lr"], lam=over["lam"])
    if strategy is not None:
        opt = replace(opt, strategy=GatewayStrategy.parse(strategy))
    return replace(base, task=category, mode=None, opt=opt)


def run_benchmark(records: list[dict], base: RunConfig, models: Models, strategies=("random",),
                  root=None, overrides: dict | None = None, on_case=None) -> tuple[list[dict], list[dict]]:
    """Returns (per-case rows, skipped records)."""
    rows, skipped = [], []
    for rec in records:
        try:
            trip = EditTriplet.from_record(rec)
            if rec.get("image"):
                path = Path(root or ".") / rec["image"]
                if not path.exists():
                    raise FileNotFoundError(path)
                image = load_image(path)
            else:
                image = trip.image()
        except (FileNotFoundError, KeyError, InvalidArgument) as exc:
            log.warning("skipping triplet %s: %s", rec.get("index"), exc)
            skipped.append(rec)
            continue
        for strat in strategies:
            cfg = case_config(base, trip.category, strat, overrides)
            out = edit_image(models, image, trip.target, cfg)
            row = {"index": trip.index, "category": trip.category, "group": TASK_MODE[trip.category],
                   "strategy": GatewayStrategy.parse(strat).value, "alignment_score": out.alignment,
                   "self_sim_distance": out.self_sim,
                   "direct_alignment_score": alignment_score(out.images[0], trip.target, models.embedder)}
            rows.append(row)
            if on_case is not None:
                on_case(row)
    return rows, skipped


def summarize(rows: list[dict]) -> list[dict]:
    """Mean metrics per (strategy, category) and per (strategy, group), categories in task order."""
    out = []
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    for strat in strategies:
        sub = [r for r in rows if r["strategy"] == strat]
        for cat in TASKS:
            cr = [r for r in sub if r["category"] == cat]
            if cr:
                out.append({"strategy": strat, "scope": cat, "n": len(cr),
                            "alignment_score": float(np.mean([r["alignment_score"] for r in cr])),
                            "self_sim_distance": float(np.mean([r["self_sim_distance"] for r in cr]))})
        for group, cats in GROUPS.items():
            gr = [r for r in sub if r["category"] in cats]
            if gr:
                out.append({"strategy": strat, "scope": group, "n": len(gr),
                            "alignment_score": float(np.mean([r["alignment_score"] for r in gr])),
                            "self_sim_distance": float(np.mean([r["self_sim_distance"] for r in gr]))})
        if sub:
            out.append({"strategy": strat, "scope": "all", "n": len(sub),
                        "alignment_score": float(np.mean([r["alignment_score"] for r in sub])),
                        "self_sim_distance": float(np.mean([r["self_sim_distance"] for r in sub]))})
    return out


def write_csv(path, rows: list[dict], columns=None) -> None:
    import csv

    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def cmd_benchmark(manifest_path, cfg: RunConfig, strategies=("random",), models: Models | None = None,
                  out_dir=None) -> list[dict]:
    records = load_benchmark(manifest_path)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not records:
        write_csv(out / "cases.csv", [], ["index", "category", "group", "strategy", "alignment_score",
                                          "self_sim_distance", "direct_alignment_score"])
        write_csv(out / "summary.csv", [], ["strategy", "scope", "n", "alignment_score", "self_sim_distance"])
        return []
    models = models or Models.load(cfg)
    rows, skipped = run_benchmark(records, cfg, models, strategies, root=Path(manifest_path).parent)
    table = summarize(rows)
    write_csv(out / "cases.csv", rows)
    write_csv(out / "summary.csv", table)
    if skipped:
        (out / "skipped.json").write_text(json.dumps([r.get("index") for r in skipped]))
    return table


# ---------------------------------------------------------------- profiling


def profile_gateways(models: Models, image, target: ToyScene, cfg: RunConfig, counts=(1, 3, 5, 10)) -> list[dict]:
    """One instrumented optimisation loop per gateway count."""
    backend, sched, codec = models.backend, models.schedule, models.codec
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    z0 = codec.encode(img)
    null = backend.null_condition()
    traj = invert(z0, null, backend, sched, cfg.inversion_cfg_scale, null)
    share_cfg = cfg.share_config(backend)
    _, cache = reconstruct_with_substitution(traj, share_cfg, backend, sched, null)
    target_cond = backend.encode_text(target)
    text_emb = models.embedder.embed_text(target).detach()
    from .attention import install_share_hooks

    rows = []
    for n in counts:
        for site in backend.sites:
            site.reset_clones(trainable=share_cfg.mode.trainable)
        hooks = install_share_hooks(backend, share_cfg, cache)
        gw = select_gateways(cfg.opt.strategy, sched.S, n, np.random.default_rng(cfg.seed))
        stats = RolloutStats()
        t0 = time.perf_counter()
        z = sample_with_gateways(traj.z_T, target_cond, hooks, gw, backend, sched, null, cfg.opt.cfg_scale, stats)
        loss = clip_loss(models.embedder.embed_image(codec.decode(z)[None])[0], text_emb) + \
            cfg.opt.lam * reg_loss(z, cache.z0, cfg.opt.reg_reduction)
        if loss.requires_grad:
            loss.backward()
        rows.append({"gateways": n, "retained_graphs": stats.retained_graphs, "saved_bytes": stats.saved_bytes,
                     "wall_clock": time.perf_counter() - t0})
    for site in backend.sites:
        site.reset_clones()
    return rows
