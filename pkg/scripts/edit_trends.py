"""Loop-wise alignment on colour edits and the reconstruction-strength sweep on a pose edit.

    python scripts/edit_trends.py --cases 10 --seeds 5
"""
import argparse
import json

import numpy as np

from dualedit.embedder import alignment_score, self_similarity_distance
from dualedit.pipeline import Models, RunConfig, edit_image
from dualedit.toydata import attribute_triplets, generate_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cases", type=int, default=10)
    ap.add_argument("--loops", type=int, default=5)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    models = Models.load(RunConfig())

    for trip in attribute_triplets(args.cases, seed=0):
        out = edit_image(models, trip.image(), trip.target, RunConfig.for_task("attribute", loops=args.loops,
                                                                              seed=trip.index))
        scores = [round(alignment_score(im, trip.target, models.embedder), 2) for im in out.images]
        print(json.dumps({"case": trip.index, "target": trip.target_caption, "alignment_by_loop": scores,
                          "total_by_loop": [round(h.total, 4) for h in out.history]}))

    trip = next(t for t in generate_benchmark(20, 0) if t.category == "pose")
    src = trip.image()
    for lam in (0.0, 1.0, 10.0):
        d = [self_similarity_distance(edit_image(models, src, trip.target,
                                                 RunConfig.for_task("pose", lam=lam, seed=s)).final_image,
                                      src, models.embedder) for s in range(args.seeds)]
        print(json.dumps({"lambda": lam, "self_sim_distance": float(np.mean(d))}))


if __name__ == "__main__":
    main()
