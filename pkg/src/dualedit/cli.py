"""Command-line entry point: ``dualedit {train,make-benchmark,edit,benchmark,profile}``.

Exit status: 0 success, 2 usage error, 3 configuration error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigurationError, DualEditError, InvalidArgument
from .gateway import GatewayStrategy

EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 2, 3, 4

log = logging.getLogger("dualedit")


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidArgument(message)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_run_flags(p):
    p.add_argument("--config", help="INI run config; flags below override it")
    p.add_argument("--task", choices=["replacement", "attribute", "style", "pose", "shape"])
    p.add_argument("--mode", choices=["structure", "nonrigid"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--loops", type=int)
    p.add_argument("--gateways", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--strategy", choices=[s.value for s in GatewayStrategy])
    p.add_argument("--steps", type=int, help="number of sampling steps S")
    p.add_argument("--seed", type=int)
    p.add_argument("--denoiser", help="denoiser checkpoint")
    p.add_argument("--embedder", help="embedder checkpoint")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    ap = UsageParser(prog="dualedit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    p = sub.add_parser("train", help="train a toy denoiser or embedder")
    p.add_argument("model", choices=["denoiser", "embedder"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("make-benchmark", help="render the toy editing benchmark")
    p.add_argument("--per-task", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("edit", help="edit one image towards a target caption")
    p.add_argument("image")
    p.add_argument("caption", help='e.g. "a small blue circle at left, plain background"')
    _add_run_flags(p)

    p = sub.add_parser("benchmark", help="run the benchmark and write the metric tables")
    p.add_argument("manifest", help="benchmark.jsonl")
    p.add_argument("--strategies", default="random",
                   help="comma-separated gateway strategies, or 'all'")
    _add_run_flags(p)

    p = sub.add_parser("profile", help="retained graphs, memory proxy and wall clock per gateway count")
    p.add_argument("image")
    p.add_argument("caption")
    p.add_argument("--counts", type=_int_list, default=[1, 3, 5, 10])
    _add_run_flags(p)
    return ap


def run_config(args):
    from .pipeline import RunConfig, TASK_DEFAULTS
    from .schedule import NoiseSchedule

    cfg = RunConfig.load(args.config) if args.config else RunConfig.for_task(args.task or "attribute")
    if args.task and args.task != cfg.task:
        d = TASK_DEFAULTS[args.task]
        cfg = replace(cfg, task=args.task, opt=replace(cfg.opt, lr=d["lr"], lam=d["lam"]))
    opt = {}
    for flag, key in (("lam", "lam"), ("loops", "loops"), ("gateways", "gateways"), ("lr", "lr"),
                      ("strategy", "strategy")):
        if getattr(args, flag) is not None:
            opt[key] = getattr(args, flag)
    if opt:
        cfg = replace(cfg, opt=replace(cfg.opt, **opt))
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.steps:
        s = cfg.schedule
        cfg = replace(cfg, schedule=NoiseSchedule(s.num_train_steps, s.beta_start, s.beta_end, args.steps))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.denoiser:
        cfg = replace(cfg, denoiser_ckpt=args.denoiser)
    if args.embedder:
        cfg = replace(cfg, embedder_ckpt=args.embedder)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_train(args) -> int:
    import torch

    from .denoiser import (DenoiserTrainConfig, save_checkpoint, toy_training_set, train_toy_denoiser)
    from .embedder import EmbedderTrainConfig, embedder_dataset, save_embedder, train_toy_embedder
    from .schedule import NoiseSchedule

    over = {k: v for k, v in (("steps", args.steps), ("batch_size", args.batch_size), ("lr", args.lr)) if v}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(args.seed)
    if args.model == "denoiser":
        cfg = DenoiserTrainConfig(seed=args.seed, **over)
        sched = NoiseSchedule()
        images, tokens = toy_training_set(cfg.renders_per_scene, args.seed)
        ck = train_toy_denoiser(images, tokens, sched, cfg)
        save_checkpoint(out, ck.model, "denoiser", ck.model.arch, sched, ck.loss_curve)
        summary = {"final_loss": ck.loss_curve[-1][1]}
    else:
        cfg = EmbedderTrainConfig(seed=args.seed, **over)
        train = embedder_dataset(cfg.renders_per_scene, args.seed)
        heldout = embedder_dataset(1, args.seed + 99)
        ck = train_toy_embedder(*train, cfg, heldout=heldout)
        save_embedder(out, ck)
        summary = {"final_loss": ck.loss_curve[-1][1], "heldout_accuracy": ck.heldout_accuracy}
    out.with_suffix(".curve.json").write_text(json.dumps(ck.loss_curve))
    print(json.dumps({"checkpoint": str(out), **summary}))
    return 0


def cmd_make_benchmark(args) -> int:
    from .toydata import generate_benchmark, save_benchmark

    path = save_benchmark(generate_benchmark(args.per_task, args.seed), args.out)
    print(path)
    return 0


def cmd_edit(args) -> int:
    from .pipeline import run_edit

    manifest = run_edit(args.image, args.caption, run_config(args))
    print(json.dumps({"out": manifest["config"]["out_dir"], **manifest["metrics"],
                      "final_latent_sha256": manifest["final_latent_sha256"]}))
    return 0


def cmd_benchmark(args) -> int:
    from .pipeline import cmd_benchmark as run

    names = [s.value for s in GatewayStrategy] if args.strategies == "all" else args.strategies.split(",")
    strategies = [GatewayStrategy.parse(s).value for s in names]
    cfg = run_config(args)
    table = run(args.manifest, cfg, strategies, out_dir=cfg.out_dir)
    for row in table:
        print(json.dumps(row))
    return 0


def cmd_profile(args) -> int:
    from .imageio import load_image
    from .pipeline import Models, profile_gateways, write_csv
    from .toydata import parse_caption

    cfg = run_config(args)
    target = parse_caption(args.caption)
    image = load_image(args.image)
    if any(n < 0 or n > cfg.schedule.S for n in args.counts):
        raise InvalidArgument(f"gateway counts must lie in 0..{cfg.schedule.S}")
    rows = profile_gateways(Models.load(cfg), image, target, cfg, args.counts)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "profile.csv", rows)
    for row in rows:
        print(json.dumps(row))
    return 0


COMMANDS = {"train": cmd_train, "make-benchmark": cmd_make_benchmark, "edit": cmd_edit,
            "benchmark": cmd_benchmark, "profile": cmd_profile}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except InvalidArgument as exc:
        print(f"dualedit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InvalidArgument as exc:
        print(f"dualedit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"dualedit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DualEditError, RuntimeError, OSError) as exc:
        print(f"dualedit: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
