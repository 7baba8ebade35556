"""Compare the four gateway strategies on the toy benchmark.

    python scripts/strategy_ablation.py --per-task 20 --out runs/ablation
"""
import argparse
import json
from pathlib import Path

from dualedit.pipeline import Models, RunConfig, cmd_benchmark
from dualedit.toydata import generate_benchmark, save_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--per-task", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--loops", type=int, default=3)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    out = Path(args.out)
    manifest = save_benchmark(generate_benchmark(args.per_task, args.seed), out / "benchmark")
    cfg = RunConfig.for_task("attribute", loops=args.loops, out_dir=str(out))
    table = cmd_benchmark(manifest, cfg, ["random", "former", "latter", "intervals"], Models.load(cfg))
    for row in table:
        if row["scope"] in ("structure", "nonrigid", "all"):
            print(json.dumps(row))


if __name__ == "__main__":
    main()
