"""Timing harness and ablation runner producing desk-scale report tables."""

from __future__ import annotations

import hashlib
import json
import statistics
import time
from dataclasses import dataclass, asdict, replace

import numpy as np

from .inference import dice_whole_volume, make_query_grid, resample_labels, segment_volume
from .model import ModelConfig, ResidualTransformer
from .trainer import TrainConfig, _BatchGatherer, build_sample_set, evaluate_on_samples, train
from .volume import Volume

# Published full-scale reference values, recorded in reports for context only;
# never asserted at desk scale.
REFERENCE_WHOLE_VOLUME_CPU_SECONDS = 2.24
REFERENCE_DICE = {"internal": 0.784, "totalsegmentator": 0.721, "whole_volume": 0.720}


@dataclass
class BenchReport:
    gather_seconds: float
    forward_seconds: float
    stitch_seconds: float
    whole_volume_seconds: float
    queries: int
    queries_per_sec: float
    thread_count: int
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    variant: str
    runs: int
    reference_cpu_seconds: float = REFERENCE_WHOLE_VOLUME_CPU_SECONDS

    def format_table(self) -> str:
        lines = [
            f"whole-volume timing  (variant={self.variant}, threads={self.thread_count}, "
            f"dims={self.dims}, spacing={self.spacing} mm, "
            f"median of {self.runs} runs; published full-scale reference "
            f"{self.reference_cpu_seconds} s, context only)",
            f"  gather   {self.gather_seconds:9.4f} s",
            f"  forward  {self.forward_seconds:9.4f} s",
            f"  stitch   {self.stitch_seconds:9.4f} s",
            f"  total    {self.whole_volume_seconds:9.4f} s",
            f"  queries  {self.queries}  ({self.queries_per_sec:.1f} queries/s)",
        ]
        return "\n".join(lines)


def bench_segment(model: ResidualTransformer, v: Volume, threads: int = 1,
                  runs: int = 5) -> BenchReport:
    """Median-of-runs whole-volume timing with one excluded warm-up run."""
    from .model import FusedDecoder
    from .sampler import build_offset_table, default_layout

    if runs < 5:
        runs = 5
    # one-time preparation shared by every run: offset table, fused decoder
    table = build_offset_table(default_layout(), v.dims, v.spacing)
    decoder = FusedDecoder(model)
    segment_volume(model, v, threads=threads, table=table, decoder=decoder)  # warm-up
    totals, gathers, forwards, stitches = [], [], [], []
    for _ in range(runs):
        phases = {}
        t0 = time.perf_counter()
        segment_volume(model, v, threads=threads, phase_times=phases,
                       table=table, decoder=decoder)
        totals.append(time.perf_counter() - t0)
        gathers.append(phases["gather"])
        forwards.append(phases["forward"])
        stitches.append(phases["stitch"])
    queries = make_query_grid(v).total
    total = statistics.median(totals)
    gather = statistics.median(gathers)
    forward = statistics.median(forwards)
    return BenchReport(
        gather_seconds=gather,
        forward_seconds=forward,
        stitch_seconds=statistics.median(stitches),
        whole_volume_seconds=total,
        queries=queries,
        queries_per_sec=queries / (gather + forward),
        thread_count=threads,
        dims=v.dims,
        spacing=v.spacing,
        variant=model.cfg.variant,
        runs=runs,
    )


@dataclass
class AblationRow:
    variant: str
    descriptor_dice: float
    whole_volume_dice: float
    per_class_descriptor: dict
    per_class_whole_volume: dict


@dataclass
class AblationReport:
    rows: list[AblationRow]
    shared_config_hash: str
    reference_dice: dict

    def format_table(self) -> str:
        lines = [
            f"{'variant':18s} {'descriptor dice':>16s} {'whole-volume dice':>18s}",
        ]
        for r in self.rows:
            lines.append(
                f"{r.variant:18s} {r.descriptor_dice:16.4f} {r.whole_volume_dice:18.4f}"
            )
        lines.append(f"shared config hash: {self.shared_config_hash}")
        lines.append(
            "published full-scale reference (context only): "
            + ", ".join(f"{k}={v}" for k, v in self.reference_dice.items())
        )
        return "\n".join(lines)


def _config_hash(base_cfg: ModelConfig, budget: TrainConfig, eval_seed: int) -> str:
    shared = {
        "model": {k: v for k, v in asdict(base_cfg).items() if k != "variant"},
        "train": asdict(budget),
        "eval_seed": eval_seed,
    }
    return hashlib.sha256(json.dumps(shared, sort_keys=True).encode()).hexdigest()[:16]


def run_ablation(train_set, test_set, variants, base_cfg: ModelConfig,
                 budget: TrainConfig, eval_seed: int = 1234,
                 log_sink=None) -> AblationReport:
    """Train each variant under an identical budget; score a frozen test set.

    Rows differ only in the model variant: data, sampling seeds, and the
    optimizer budget are shared (hash recorded in the report).
    """
    if len(variants) < 2:
        raise ValueError("need at least 2 variants")
    eval_samples = build_sample_set(test_set, budget, eval_seed)
    gatherer = _BatchGatherer(test_set)
    rows = []
    for variant in variants:
        cfg = replace(base_cfg, variant=variant)
        model = ResidualTransformer(cfg)
        # fresh optimizer state per row; budget otherwise shared verbatim
        model, _ = train(
            model, train_set, replace(budget, adam=replace(budget.adam, t=0)),
            log_sink=log_sink,
        )
        desc = evaluate_on_samples(model, list(eval_samples.entries), gatherer)
        wv_scores = []
        wv_class = {}
        for v, l in test_set:
            stitched = segment_volume(model, v)
            pred = resample_labels(stitched, l.dims, l.spacing)
            d = dice_whole_volume(pred, l)
            wv_scores.append(d["mean"])
            for k, val in d.items():
                if k != "mean":
                    wv_class.setdefault(k, []).append(val)
        rows.append(AblationRow(
            variant=variant,
            descriptor_dice=desc["mean"],
            whole_volume_dice=float(np.mean(wv_scores)),
            per_class_descriptor={k: v for k, v in desc.items() if k != "mean"},
            per_class_whole_volume={k: float(np.mean(v)) for k, v in wv_class.items()},
        ))
    return AblationReport(rows, _config_hash(base_cfg, budget, eval_seed), dict(REFERENCE_DICE))
