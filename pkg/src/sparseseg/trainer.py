"""Sampling policy and optimization loop over (descriptor, 5x5x5 target) pairs.

Per training image: 1000 query points, 900 uniform over the voxel grid and
100 balanced equally across the classes present in the label map.
Descriptors are re-gathered from stored query coordinates at batch time so
memory stays bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .metrics import dice_per_class, mean_foreground_dice
from .model import ResidualTransformer
from .sampler import (
    build_offset_table,
    default_layout,
    sample_descriptor_batch,
    sample_label_window,
)
from .volume import LabelVolume, Volume, normalize_intensity


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the metrics log gathered so far."""

    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


@dataclass
class TrainConfig:
    samples_per_image: int = 1000
    balanced_fraction: float = 0.10
    batch_size: int = 128
    max_steps: int = 5000
    eval_every: int = 500
    adam: nn.AdamConfig = field(default_factory=nn.AdamConfig)
    seed: int = 0

    def __post_init__(self):
        quota = self.balanced_fraction * self.samples_per_image
        if abs(quota - round(quota)) > 1e-9:
            raise ValueError("balanced_fraction * samples_per_image must be an integer")

    @property
    def balanced_quota(self) -> int:
        return round(self.balanced_fraction * self.samples_per_image)


@dataclass(frozen=True)
class SampleEntry:
    volume_id: int
    query: tuple[int, int, int]
    target: np.ndarray  # (5, 5, 5) int
    provenance: str     # "uniform" | "balanced(<class>)"


@dataclass(frozen=True)
class SampleSet:
    entries: tuple[SampleEntry, ...]


def draw_samples(v: Volume, l: LabelVolume, cfg: TrainConfig, rng,
                 volume_id: int = 0) -> list[SampleEntry]:
    """Draw one image's query points with targets from the 5x5x5 label window."""
    if v.dims != l.dims:
        raise ValueError("volume/label geometry mismatch")
    dims = np.asarray(v.dims)
    quota = cfg.balanced_quota
    n_uniform = cfg.samples_per_image - quota
    entries = []

    qs = np.stack([rng.integers(0, dims[a], n_uniform) for a in range(3)], axis=1)
    for q in qs:
        q = tuple(int(c) for c in q)
        entries.append(SampleEntry(volume_id, q, sample_label_window(l, q), "uniform"))

    present = np.flatnonzero(np.bincount(l.labels, minlength=l.class_count))
    fg_or_all = [int(k) for k in present]
    if fg_or_all == [0]:
        # background-only image: quota falls back to uniform draws
        qs = np.stack([rng.integers(0, dims[a], quota) for a in range(3)], axis=1)
        for q in qs:
            q = tuple(int(c) for c in q)
            entries.append(
                SampleEntry(volume_id, q, sample_label_window(l, q), "balanced(0)")
            )
        return entries

    shares = {k: quota // len(fg_or_all) for k in fg_or_all}
    for i in range(quota % len(fg_or_all)):  # remainder round-robin by class index
        shares[fg_or_all[i]] += 1
    nx, ny, _ = v.dims
    for k in fg_or_all:
        voxels = np.flatnonzero(l.labels == k)
        picks = voxels[rng.integers(0, len(voxels), shares[k])]
        x = picks % nx
        y = (picks // nx) % ny
        z = picks // (nx * ny)
        for q in zip(x, y, z):
            q = tuple(int(c) for c in q)
            entries.append(
                SampleEntry(volume_id, q, sample_label_window(l, q), f"balanced({k})")
            )
    return entries


def build_sample_set(dataset, cfg: TrainConfig, seed: int) -> SampleSet:
    """Draw samples for every (Volume, LabelVolume) pair in the dataset."""
    rng = np.random.default_rng(seed)
    entries = []
    for vid, (v, l) in enumerate(dataset):
        entries.extend(draw_samples(v, l, cfg, rng, volume_id=vid))
    return SampleSet(tuple(entries))


class _BatchGatherer:
    """Caches normalized volumes and offset tables keyed by volume id."""

    def __init__(self, dataset, layout=None):
        self.layout = layout or default_layout()
        self.volumes = [normalize_intensity(v) for v, _ in dataset]
        self._tables = {}

    def table(self, vid):
        v = self.volumes[vid]
        key = (v.dims, v.spacing)
        if key not in self._tables:
            self._tables[key] = build_offset_table(self.layout, v.dims, v.spacing)
        return self._tables[key]

    def gather(self, entries) -> np.ndarray:
        """(N, 9, 729) descriptor blocks for a list of sample entries."""
        out = np.empty((len(entries), 9, 729), np.float32)
        by_vid = {}
        for i, e in enumerate(entries):
            by_vid.setdefault(e.volume_id, []).append(i)
        for vid, idxs in by_vid.items():
            qs = np.array([entries[i].query for i in idxs])
            vals = sample_descriptor_batch(self.volumes[vid], self.table(vid), qs)
            out[idxs] = vals.reshape(len(idxs), 9, 729)
        return out


def train(model: ResidualTransformer, dataset, cfg: TrainConfig,
          log_sink=None, eval_entries=None):
    """Optimize the model on descriptor/target pairs drawn from the dataset.

    Returns (model, metrics log).  `log_sink`, when given, receives one
    line-delimited record per logged step.  Deterministic for a fixed seed.
    """
    if not dataset:
        raise ValueError("need at least one training image")
    rng = np.random.default_rng(cfg.seed)
    sample_set = build_sample_set(dataset, cfg, int(rng.integers(2**31)))
    entries = list(sample_set.entries)
    gatherer = _BatchGatherer(dataset)

    if eval_entries is None:
        eval_rng = np.random.default_rng(int(rng.integers(2**31)))
        eval_idx = eval_rng.choice(len(entries), size=min(200, len(entries)), replace=False)
        eval_entries = [entries[i] for i in eval_idx]

    log = []
    order = []
    pos = 0
    for step in range(1, cfg.max_steps + 1):
        batch = []
        while len(batch) < cfg.batch_size:
            if pos >= len(order):
                order = rng.permutation(len(entries))
                pos = 0
            batch.append(entries[order[pos]])
            pos += 1
        descs = gatherer.gather(batch)
        targets = np.stack([e.target for e in batch]).astype(np.int64)

        logits, cache = model.forward_batch_cached(descs)
        C = model.cfg.class_count
        loss, dlogits = nn.softmax_cross_entropy(
            logits.reshape(-1, C), targets.reshape(-1)
        )
        if not np.isfinite(loss):
            record = {"step": step, "loss": loss, "event": "non-finite loss"}
            log.append(record)
            _emit(log_sink, record)
            raise TrainingDiverged(f"non-finite loss at step {step}", log)
        model.zero_grad()
        model.backward_batch(dlogits.reshape(logits.shape), cache)
        nn.adam_step(model.parameters(), cfg.adam)

        if step == 1 or step % cfg.eval_every == 0 or step == cfg.max_steps:
            dice = evaluate_on_samples(model, eval_entries, gatherer)
            record = {"step": step, "loss": loss, "mean_dice": dice["mean"]}
            log.append(record)
            _emit(log_sink, record)
    return model, log


def _emit(sink, record):
    if sink is not None:
        sink.write(
            " ".join(f"{k}={v}" for k, v in record.items()) + "\n"
        )


def evaluate_on_samples(model: ResidualTransformer, entries, gatherer,
                        batch_size: int = 256) -> dict:
    """Per-class dice of argmax predictions over pooled 5x5x5 windows."""
    preds = []
    targets = []
    for i in range(0, len(entries), batch_size):
        chunk = entries[i : i + batch_size]
        descs = gatherer.gather(chunk)
        logits = model.forward_batch(descs)
        preds.append(np.argmax(logits, axis=-1).ravel())
        targets.append(np.stack([e.target for e in chunk]).ravel())
    pred = np.concatenate(preds)
    gt = np.concatenate(targets)
    per_class = dice_per_class(pred, gt, model.cfg.class_count)
    present = {k for k in per_class if (gt == k).any()}
    per_class = {k: v for k, v in per_class.items() if k in present}
    result = dict(per_class)
    result["mean"] = mean_foreground_dice(per_class)
    return result
