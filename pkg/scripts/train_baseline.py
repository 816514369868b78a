#!/usr/bin/env python3
"""Train the full variant on procedural phantoms and score held-out volumes.

The defaults are a quick smoke run (a few minutes).  The flags scale it up;
the desk-scale reference experiment is:

    python scripts/train_baseline.py --train-count 40 --test-count 10 \
        --dims 96 --steps 5000 --batch-size 128
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from sparseseg.inference import dice_whole_volume, resample_labels, segment_volume
from sparseseg.model import ModelConfig, ResidualTransformer, save_checkpoint
from sparseseg.phantom import PhantomConfig, generate_phantom
from sparseseg.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-count", type=int, default=4)
    ap.add_argument("--test-count", type=int, default=2)
    ap.add_argument("--dims", type=int, default=48, help="cubic phantom edge in voxels")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--samples-per-image", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="baseline.spsg")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    base = PhantomConfig(dims=(args.dims,) * 3, seed=0)
    seeds = rng.integers(0, 2**31 - 1, args.train_count + args.test_count)
    print(f"generating {len(seeds)} phantoms ({args.dims}^3) ...", flush=True)
    volumes = [generate_phantom(replace(base, seed=int(s))) for s in seeds]
    train_set = volumes[: args.train_count]
    test_set = volumes[args.train_count:]

    model = ResidualTransformer(ModelConfig(seed=args.seed))
    cfg = TrainConfig(samples_per_image=args.samples_per_image,
                      batch_size=args.batch_size, max_steps=args.steps,
                      eval_every=max(1, args.steps // 10), seed=args.seed)
    t0 = time.perf_counter()
    model, log = train(model, train_set, cfg, log_sink=sys.stderr)
    print(f"trained {args.steps} steps in {time.perf_counter() - t0:.1f} s")

    scores = []
    for v, l in test_set:
        stitched = segment_volume(model, v)
        pred = resample_labels(stitched, l.dims, l.spacing)
        scores.append(dice_whole_volume(pred, l)["mean"])
    print(f"held-out mean foreground dice: {float(np.mean(scores)):.4f} "
          f"(per volume: {[round(s, 4) for s in scores]})")

    with open(args.out, "wb") as f:
        save_checkpoint(model, f)
    print(f"checkpoint saved to {args.out}")
    Path(args.out).with_suffix(".json").write_text(json.dumps({
        "heldout_mean_dice": float(np.mean(scores)),
        "final": log[-1],
    }, indent=2))


if __name__ == "__main__":
    main()
