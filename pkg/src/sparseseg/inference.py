"""Whole-volume segmentation: 10 mm query grid, 5x5x5 blocks at 2 mm, stitching.

Queries are block-centered: centers at 5, 15, 25, ... mm per axis, so the
predicted 10 mm blocks tile edge to edge.  The stitched output is a 2 mm
isotropic label volume whose voxel m sits at 1 + 2m mm along each axis.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .metrics import dice_per_class, mean_foreground_dice
from .model import ResidualTransformer
from .sampler import (
    DESCRIPTOR_DIM,
    OffsetTable,
    build_offset_table,
    default_layout,
    round_half_away,
    sample_descriptor_batch,
)
from .volume import LabelVolume, Volume, normalize_intensity

QUERY_STEP_MM = 10.0
BLOCK = 5
OUT_SPACING_MM = 2.0
STITCH_ORIGIN_MM = 1.0  # first output voxel center along each axis


@dataclass(frozen=True)
class QueryGrid:
    counts: tuple[int, int, int]          # queries per axis
    centers_mm: tuple[np.ndarray, np.ndarray, np.ndarray]
    voxels: np.ndarray                    # (N, 3) query voxel coordinates
    indices: np.ndarray                   # (N, 3) per-axis grid indices

    @property
    def total(self) -> int:
        return len(self.voxels)


def make_query_grid(v: Volume) -> QueryGrid:
    """Block-centered 10 mm query lattice over the volume's physical extent."""
    extent = v.extent_mm()
    counts = tuple(int(np.floor(e / QUERY_STEP_MM)) for e in extent)
    if any(c < 1 for c in counts):
        raise ValueError(f"volume extent {extent} mm is thinner than one 10 mm block")
    centers = tuple(
        QUERY_STEP_MM / 2 + QUERY_STEP_MM * np.arange(counts[a]) for a in range(3)
    )
    vox_1d = [
        np.clip(round_half_away(centers[a] / v.spacing[a]), 0, v.dims[a] - 1)
        for a in range(3)
    ]
    iz, iy, ix = np.meshgrid(
        np.arange(counts[2]), np.arange(counts[1]), np.arange(counts[0]), indexing="ij"
    )
    indices = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
    voxels = np.stack(
        [vox_1d[0][indices[:, 0]], vox_1d[1][indices[:, 1]], vox_1d[2][indices[:, 2]]],
        axis=1,
    )
    return QueryGrid(counts, centers, voxels, indices)


@dataclass(frozen=True)
class StitchedLabels:
    labels: LabelVolume                 # 2 mm isotropic, covers the tiled region
    origin_mm: float = STITCH_ORIGIN_MM
    write_counts: np.ndarray | None = None  # debug mode only


def segment_volume(model: ResidualTransformer, v: Volume, threads: int = 1,
                   debug_writes: bool = False, batch_size: int = 512,
                   table: OffsetTable | None = None,
                   phase_times: dict | None = None,
                   fused: bool = True, decoder=None) -> StitchedLabels:
    """Predict and stitch 5x5x5 blocks over the whole query grid.

    Blocks are disjoint, so query chunks may be processed concurrently.
    `phase_times`, when provided, accumulates gather/forward/stitch seconds.
    `fused` selects the GEMM-folded decoder (same arithmetic, reassociated);
    a prebuilt FusedDecoder can be passed to amortize its construction.
    """
    import time

    from .model import FusedDecoder

    vn = normalize_intensity(v)
    if table is None:
        table = build_offset_table(default_layout(), vn.dims, vn.spacing)
    if fused:
        if decoder is None:
            decoder = FusedDecoder(model)
        forward = decoder.forward_batch
    else:
        forward = model.forward_batch
    grid = make_query_grid(vn)
    out_dims = tuple(BLOCK * c for c in grid.counts)
    out = np.zeros((out_dims[2], out_dims[1], out_dims[0]), np.int32)  # [z, y, x]
    counts = np.zeros_like(out, np.int32) if debug_writes else None

    def process(chunk_slice):
        qs = grid.voxels[chunk_slice]
        idx = grid.indices[chunk_slice]
        t0 = time.perf_counter()
        descs = sample_descriptor_batch(vn, table, qs).reshape(len(qs), 9, 729)
        t1 = time.perf_counter()
        logits = forward(descs)
        pred = np.argmax(logits, axis=-1).astype(np.int32)  # (n, 5, 5, 5) [z, y, x]
        t2 = time.perf_counter()
        for j in range(len(qs)):
            bx, by, bz = (int(i) * BLOCK for i in idx[j])
            out[bz : bz + BLOCK, by : by + BLOCK, bx : bx + BLOCK] = pred[j]
            if counts is not None:
                counts[bz : bz + BLOCK, by : by + BLOCK, bx : bx + BLOCK] += 1
        t3 = time.perf_counter()
        return t1 - t0, t2 - t1, t3 - t2

    chunks = [
        slice(i, min(i + batch_size, grid.total)) for i in range(0, grid.total, batch_size)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            timings = list(pool.map(process, chunks))
    else:
        timings = [process(c) for c in chunks]
    if phase_times is not None:
        gather, forward, stitch = (sum(t[i] for t in timings) for i in range(3))
        phase_times.update(gather=gather, forward=forward, stitch=stitch)

    labels = LabelVolume(
        out_dims, (OUT_SPACING_MM,) * 3, out.reshape(-1), model.cfg.class_count
    )
    return StitchedLabels(labels, STITCH_ORIGIN_MM, counts)


def resample_labels(sl: StitchedLabels, dims, spacing) -> LabelVolume:
    """Nearest-neighbor resampling onto a target grid; outside region -> 0."""
    src = sl.labels
    out = np.zeros((dims[2], dims[1], dims[0]), src.labels.dtype)
    idx = []
    valid = []
    for a in range(3):
        pos = np.arange(dims[a]) * spacing[a]
        i = round_half_away((pos - sl.origin_mm) / OUT_SPACING_MM)
        ok = (i >= 0) & (i < src.dims[a])
        idx.append(np.clip(i, 0, src.dims[a] - 1))
        valid.append(ok)
    src3 = src.as_3d()
    block = src3[np.ix_(idx[2], idx[1], idx[0])]
    mask = (
        valid[2][:, None, None] & valid[1][None, :, None] & valid[0][None, None, :]
    )
    out[mask] = block[mask]
    return LabelVolume(tuple(dims), tuple(spacing), out.reshape(-1), src.class_count)


def dice_whole_volume(pred: LabelVolume, gt: LabelVolume) -> dict:
    """Per-class and mean foreground dice; geometries must match."""
    if not pred.same_geometry(gt):
        raise ValueError(f"geometry mismatch: {pred.dims} vs {gt.dims}")
    per_class = dice_per_class(pred.labels, gt.labels, max(pred.class_count, gt.class_count))
    result = dict(per_class)
    result["mean"] = mean_foreground_dice(per_class)
    return result


def expected_descriptor_reads(v: Volume) -> int:
    """Total interior-path reads for one whole-volume pass (accounting aid)."""
    return DESCRIPTOR_DIM * make_query_grid(v).total
