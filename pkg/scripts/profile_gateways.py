"""Retained graphs, saved-tensor bytes and wall clock against the number of gateways.

    python scripts/profile_gateways.py --counts 0,1,3,5,10,25,50
"""
import argparse
import json

from dualedit.pipeline import Models, RunConfig, profile_gateways
from dualedit.toydata import ToyScene, render


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--counts", default="0,1,3,5,10,25,50")
    args = ap.parse_args()
    cfg = RunConfig.for_task("attribute")
    rows = profile_gateways(Models.load(cfg), render(ToyScene(color="red"), 0), ToyScene(color="blue"), cfg,
                            [int(c) for c in args.counts.split(",")])
    for row in rows:
        row["saved_mib"] = round(row["saved_bytes"] / 2**20, 2)
        print(json.dumps(row))


if __name__ == "__main__":
    main()
