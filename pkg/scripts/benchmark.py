#!/usr/bin/env python3
"""Gather throughput and whole-volume timing on a seeded phantom."""

import argparse
import time

import numpy as np

from sparseseg.bench import bench_segment
from sparseseg.inference import make_query_grid
from sparseseg.model import ModelConfig, ResidualTransformer
from sparseseg.phantom import PhantomConfig, generate_phantom
from sparseseg.sampler import build_offset_table, default_layout, sample_descriptor_batch
from sparseseg.volume import normalize_intensity


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=96)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    v, _ = generate_phantom(PhantomConfig(dims=(args.dims,) * 3, seed=args.seed))
    model = ResidualTransformer(ModelConfig(seed=args.seed))

    vn = normalize_intensity(v)
    table = build_offset_table(default_layout(), vn.dims, vn.spacing)
    qs = make_query_grid(vn).voxels
    sample_descriptor_batch(vn, table, qs)  # warm-up (kernel compilation)
    times = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        sample_descriptor_batch(vn, table, qs)
        times.append(time.perf_counter() - t0)
    med = sorted(times)[len(times) // 2]
    print(f"descriptor gather: {len(qs)} queries in {med:.4f} s "
          f"({len(qs) / med:,.0f} descriptors/s, single thread)")
    print()
    print(bench_segment(model, v, threads=args.threads, runs=args.runs).format_table())


if __name__ == "__main__":
    main()
