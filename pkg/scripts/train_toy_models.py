"""Train the toy denoiser and embedder and write them to the bundled checkpoint directory.

    python scripts/train_toy_models.py [--denoiser-steps 6000] [--embedder-steps 1500] [--only denoiser]
"""
import argparse
import json
import time

from dualedit.denoiser import DenoiserTrainConfig, save_checkpoint, toy_training_set, train_toy_denoiser
from dualedit.embedder import EmbedderTrainConfig, embedder_dataset, save_embedder, train_toy_embedder
from dualedit.pipeline import BUNDLED_CHECKPOINTS
from dualedit.schedule import NoiseSchedule


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--denoiser-steps", type=int, default=6000)
    ap.add_argument("--embedder-steps", type=int, default=1500)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", choices=["denoiser", "embedder"])
    ap.add_argument("--out", default=str(BUNDLED_CHECKPOINTS))
    args = ap.parse_args()
    from pathlib import Path

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.only in (None, "embedder"):
        t0 = time.time()
        cfg = EmbedderTrainConfig(steps=args.embedder_steps, seed=args.seed)
        train = embedder_dataset(cfg.renders_per_scene, seed=args.seed)
        heldout = embedder_dataset(1, seed=args.seed + 99)
        ck = train_toy_embedder(*train, cfg, heldout=heldout)
        save_embedder(out / "embedder.pt", ck)
        print(json.dumps({"model": "embedder", "heldout_accuracy": ck.heldout_accuracy,
                          "final_loss": ck.loss_curve[-1][1], "seconds": round(time.time() - t0, 1)}), flush=True)

    if args.only in (None, "denoiser"):
        t0 = time.time()
        cfg = DenoiserTrainConfig(steps=args.denoiser_steps, batch_size=args.batch_size, seed=args.seed)
        sched = NoiseSchedule()
        images, tokens = toy_training_set(cfg.renders_per_scene, seed=args.seed)
        ck = train_toy_denoiser(images, tokens, sched, cfg)
        save_checkpoint(out / "denoiser.pt", ck.model, "denoiser", ck.model.arch, sched, ck.loss_curve)
        print(json.dumps({"model": "denoiser", "final_loss": ck.loss_curve[-1][1],
                          "seconds": round(time.time() - t0, 1)}), flush=True)


if __name__ == "__main__":
    main()
