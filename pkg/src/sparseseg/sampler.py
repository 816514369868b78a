"""Hierarchical sparse descriptor sampling over a fixed 9-grid layout.

Three 27x27 orthogonal planes at 4 mm plus six 9x9x9 cubes at 2, 3, 5, 12,
28 and 64 mm; 729 samples per grid, 6561 per descriptor.  Millimeter offsets
are converted to voxel offsets once per (layout, geometry) pair so interior
queries reduce to pure flat-index gathers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import LabelVolume, Volume

PLANE_SIZE = 27
CUBE_SIZE = 9
SAMPLES_PER_GRID = 729
GRID_COUNT = 9
DESCRIPTOR_DIM = GRID_COUNT * SAMPLES_PER_GRID  # 6561

PLANE_SPACING_MM = 4.0
CUBE_SPACINGS_MM = (2.0, 3.0, 5.0, 12.0, 28.0, 64.0)

LOCAL_GRID_INDEX = 3  # the 2 mm cube doubles as the model's local window

LABEL_WINDOW = 5
LABEL_WINDOW_STEP_MM = 2.0


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x).astype(np.int64)


@dataclass(frozen=True)
class GridSpec:
    kind: str                  # "plane" | "cube"
    size: int                  # 27 for planes, 9 for cubes
    spacing_mm: float
    plane_axis: int | None = None  # axis the plane is orthogonal to

    def __post_init__(self):
        if self.kind == "plane":
            assert self.size == PLANE_SIZE and self.plane_axis in (0, 1, 2)
        elif self.kind == "cube":
            assert self.size == CUBE_SIZE and self.plane_axis is None
        else:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        assert self.spacing_mm > 0

    @property
    def sample_count(self) -> int:
        return self.size ** 2 if self.kind == "plane" else self.size ** 3

    def mm_offsets(self) -> np.ndarray:
        """(729, 3) per-sample offsets in mm as (x, y, z).

        Within a grid the fastest-varying index follows the lowest free axis,
        matching the volume's x-fastest memory convention.
        """
        half = (self.size - 1) // 2
        steps = (np.arange(self.size) - half) * self.spacing_mm
        out = np.zeros((self.sample_count, 3), np.float64)
        if self.kind == "plane":
            free = [a for a in range(3) if a != self.plane_axis]
            slow, fast = np.meshgrid(steps, steps, indexing="ij")
            out[:, free[0]] = fast.ravel()
            out[:, free[1]] = slow.ravel()
        else:
            oz, oy, ox = np.meshgrid(steps, steps, steps, indexing="ij")
            out[:, 0] = ox.ravel()
            out[:, 1] = oy.ravel()
            out[:, 2] = oz.ravel()
        return out


@dataclass(frozen=True)
class DescriptorLayout:
    grids: tuple[GridSpec, ...]

    def __post_init__(self):
        assert len(self.grids) == GRID_COUNT
        assert sum(g.sample_count for g in self.grids) == DESCRIPTOR_DIM

    @property
    def total_dim(self) -> int:
        return DESCRIPTOR_DIM


def default_layout() -> DescriptorLayout:
    """The fixed 9-grid layout: z/y/x planes at 4 mm, then six cube scales."""
    grids = [GridSpec("plane", PLANE_SIZE, PLANE_SPACING_MM, plane_axis=a) for a in (2, 1, 0)]
    grids += [GridSpec("cube", CUBE_SIZE, s) for s in CUBE_SPACINGS_MM]
    return DescriptorLayout(tuple(grids))


@dataclass(frozen=True)
class OffsetTable:
    """Precomputed voxel and flat offsets for one (layout, geometry) pair."""

    layout: DescriptorLayout
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxel_offsets: np.ndarray   # (6561, 3) int64, (x, y, z)
    flat_offsets: np.ndarray    # (6561,) int64, valid on the interior path only
    interior_margin: tuple[int, int, int]

    def is_interior(self, q) -> bool:
        return all(
            self.interior_margin[a] <= int(q[a]) < self.dims[a] - self.interior_margin[a]
            for a in range(3)
        )


def build_offset_table(layout: DescriptorLayout, dims, spacing) -> OffsetTable:
    """Convert the layout's mm offsets to voxel and flat offsets for a geometry."""
    spacing = tuple(float(s) for s in spacing)
    assert all(s > 0 for s in spacing)
    mm = np.concatenate([g.mm_offsets() for g in layout.grids], axis=0)
    vox = round_half_away(mm / np.asarray(spacing))
    nx, ny, _ = dims
    flat = vox[:, 0] + nx * (vox[:, 1] + ny * vox[:, 2])
    margin = tuple(int(m) for m in np.abs(vox).max(axis=0))
    return OffsetTable(layout, tuple(dims), spacing, vox, flat, margin)


@dataclass(frozen=True)
class Descriptor:
    values: np.ndarray  # (6561,) float32 in [0, 1]
    query: tuple[int, int, int]
    layout: DescriptorLayout = field(repr=False)

    def block(self, i: int) -> np.ndarray:
        return self.values[i * SAMPLES_PER_GRID : (i + 1) * SAMPLES_PER_GRID]

    def blocks(self) -> np.ndarray:
        return self.values.reshape(GRID_COUNT, SAMPLES_PER_GRID)

    def local_grid(self) -> np.ndarray:
        """The 2 mm cube as a (9, 9, 9) array indexed [z, y, x]."""
        return self.block(LOCAL_GRID_INDEX).reshape(CUBE_SIZE, CUBE_SIZE, CUBE_SIZE)


def sample_descriptor(v: Volume, table: OffsetTable, q) -> Descriptor:
    """Gather the 6561-value descriptor at voxel q of a normalized volume."""
    q = tuple(int(c) for c in q)
    if not v.in_bounds(q):
        raise ValueError(f"query {q} outside volume dims {v.dims}")
    if table.is_interior(q):
        base = v.flat_index(*q)
        vals = v.data[base + table.flat_offsets]
    else:
        vals = _boundary_gather(v, table.voxel_offsets, np.asarray(q))
    return Descriptor(np.asarray(vals, dtype=v.data.dtype), q, table.layout)


def sample_descriptor_checked(v: Volume, table: OffsetTable, q) -> Descriptor:
    """Force the bounds-checked path regardless of query position (testing aid)."""
    q = tuple(int(c) for c in q)
    if not v.in_bounds(q):
        raise ValueError(f"query {q} outside volume dims {v.dims}")
    vals = _boundary_gather(v, table.voxel_offsets, np.asarray(q))
    return Descriptor(np.asarray(vals, dtype=v.data.dtype), q, table.layout)


def _boundary_gather(v: Volume, voxel_offsets: np.ndarray, q: np.ndarray) -> np.ndarray:
    coords = voxel_offsets + q  # (6561, 3)
    valid = np.all((coords >= 0) & (coords < np.asarray(v.dims)), axis=1)
    out = np.zeros(len(coords), dtype=v.data.dtype)  # pad = normalized air
    cc = coords[valid]
    nx, ny, _ = v.dims
    out[valid] = v.data[cc[:, 0] + nx * (cc[:, 1] + ny * cc[:, 2])]
    return out


try:
    import numba

    @numba.njit(cache=True, fastmath=False)
    def _gather_kernel(data, nx, ny, nz, qs, vox, flat, margin, out):
        n_samples = flat.shape[0]
        for i in range(qs.shape[0]):
            qx, qy, qz = qs[i, 0], qs[i, 1], qs[i, 2]
            if (
                margin[0] <= qx < nx - margin[0]
                and margin[1] <= qy < ny - margin[1]
                and margin[2] <= qz < nz - margin[2]
            ):
                base = qx + nx * (qy + ny * qz)
                for j in range(n_samples):
                    out[i, j] = data[base + flat[j]]
            else:
                for j in range(n_samples):
                    x = qx + vox[j, 0]
                    y = qy + vox[j, 1]
                    z = qz + vox[j, 2]
                    if 0 <= x < nx and 0 <= y < ny and 0 <= z < nz:
                        out[i, j] = data[x + nx * (y + ny * z)]
                    else:
                        out[i, j] = 0.0

except ImportError:  # pragma: no cover - numba is a declared dependency
    _gather_kernel = None


def sample_descriptor_batch(v: Volume, table: OffsetTable, qs: np.ndarray) -> np.ndarray:
    """Vectorized gather for many queries; returns (N, 6561).

    Uses a compiled kernel when numba is importable; the pure-numpy fallback
    below is also the reference the kernel is tested against.
    """
    qs = np.asarray(qs, dtype=np.int64)
    if qs.ndim != 2 or qs.shape[1] != 3:
        raise ValueError("qs must be (N, 3)")
    if np.any(qs < 0) or np.any(qs >= np.asarray(v.dims)):
        raise ValueError("query outside volume")
    if _gather_kernel is not None and isinstance(v.data, np.ndarray) and type(v.data) is np.ndarray:
        out = np.empty((len(qs), DESCRIPTOR_DIM), dtype=v.data.dtype)
        nx, ny, nz = v.dims
        _gather_kernel(
            v.data, nx, ny, nz, qs, table.voxel_offsets, table.flat_offsets,
            np.asarray(table.interior_margin, np.int64), out,
        )
        return out
    return _sample_descriptor_batch_numpy(v, table, qs)


def _sample_descriptor_batch_numpy(v: Volume, table: OffsetTable, qs: np.ndarray) -> np.ndarray:
    lo = np.asarray(table.interior_margin)
    hi = np.asarray(v.dims) - lo
    interior = np.all((qs >= lo) & (qs < hi), axis=1)
    out = np.empty((len(qs), DESCRIPTOR_DIM), dtype=v.data.dtype)
    nx, ny, _ = v.dims
    if interior.any():
        base = qs[interior, 0] + nx * (qs[interior, 1] + ny * qs[interior, 2])
        out[interior] = v.data[base[:, None] + table.flat_offsets[None, :]]
    boundary = np.flatnonzero(~interior)
    # chunked so the (n, 6561, 3) coordinate tensor stays small
    for start in range(0, len(boundary), 128):
        rows = boundary[start : start + 128]
        coords = qs[rows, None, :] + table.voxel_offsets[None, :, :]
        valid = np.all((coords >= 0) & (coords < np.asarray(v.dims)), axis=2)
        cl = np.clip(coords, 0, np.asarray(v.dims) - 1)
        flat = cl[:, :, 0] + nx * (cl[:, :, 1] + ny * cl[:, :, 2])
        out[rows] = np.where(valid, v.data[flat], v.data.dtype.type(0.0))
    return out


# ---------------------------------------------------------------------------
# Label windows (training targets and stitched prediction blocks)


def label_window_offsets(spacing) -> np.ndarray:
    """(5, 5, 5, 3) voxel offsets, window indexed [z, y, x], offsets (x, y, z)."""
    steps = (np.arange(LABEL_WINDOW) - LABEL_WINDOW // 2) * LABEL_WINDOW_STEP_MM
    oz, oy, ox = np.meshgrid(steps, steps, steps, indexing="ij")
    mm = np.stack([ox, oy, oz], axis=-1)
    return round_half_away(mm / np.asarray(spacing, np.float64))


def sample_label_window(l: LabelVolume, q) -> np.ndarray:
    """Gather the 5x5x5 label targets around q; out-of-bounds -> background."""
    q = tuple(int(c) for c in q)
    if not all(0 <= q[a] < l.dims[a] for a in range(3)):
        raise ValueError(f"query {q} outside volume dims {l.dims}")
    off = label_window_offsets(l.spacing)
    coords = off + np.asarray(q)
    valid = np.all((coords >= 0) & (coords < np.asarray(l.dims)), axis=-1)
    out = np.zeros(off.shape[:3], dtype=l.labels.dtype)
    cc = coords[valid]
    nx, ny, _ = l.dims
    out[valid] = l.labels[cc[:, 0] + nx * (cc[:, 1] + ny * cc[:, 2])]
    return out


# ---------------------------------------------------------------------------
# Mosaic visualization


def descriptor_to_mosaic(d: Descriptor) -> np.ndarray:
    """Render the descriptor as an 81x81 image: nine 27x27 tiles in a 3x3 grid.

    Planes map directly; each cube contributes its nine z-slices arranged 3x3
    within the tile.  Tile order follows grid order, row-major.
    """
    img = np.zeros((81, 81), dtype=np.float64)
    for i in range(GRID_COUNT):
        tile = _grid_tile(d.layout.grids[i], d.block(i))
        r, c = divmod(i, 3)
        img[r * 27 : (r + 1) * 27, c * 27 : (c + 1) * 27] = tile
    return img


def _grid_tile(spec: GridSpec, block: np.ndarray) -> np.ndarray:
    if spec.kind == "plane":
        return block.reshape(27, 27)
    cube = block.reshape(9, 9, 9)  # [z, y, x]
    tile = np.zeros((27, 27), dtype=block.dtype)
    for z in range(9):
        r, c = divmod(z, 3)
        tile[r * 9 : (r + 1) * 9, c * 9 : (c + 1) * 9] = cube[z]
    return tile


def write_pgm(img: np.ndarray, f) -> None:
    """Emit a [0,1]-valued image as binary PGM (P5, maxval 255)."""
    h, w = img.shape
    f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
    f.write(np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).tobytes())
