"""3-D scalar volumes, label maps, intensity normalization, and raw file I/O.

Memory layout convention: x is the fastest-varying axis, so the flat index of
voxel (x, y, z) is ``x + nx * (y + ny * z)``.  ``as_3d`` therefore returns an
array indexed ``[z, y, x]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

HU_MIN = -1024.0
HU_MAX = 3071.0


class RawFormatError(ValueError):
    """Malformed raw-volume header or payload."""


@dataclass(frozen=True)
class Volume:
    """Dense scalar volume with per-axis physical spacing in mm.

    Intensities are Hounsfield-like.  Instances are immutable and safe to
    share across threads.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray  # flat, length prod(dims), x fastest

    def __post_init__(self):
        nx, ny, nz = self.dims
        if nx <= 0 or ny <= 0 or nz <= 0:
            raise ValueError(f"non-positive dims {self.dims}")
        if any(not (s > 0 and np.isfinite(s)) for s in self.spacing):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")
        if self.data.ndim != 1 or self.data.size != nx * ny * nz:
            raise ValueError(
                f"data length {self.data.size} does not match dims {self.dims}"
            )

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def as_3d(self) -> np.ndarray:
        """View of the data indexed [z, y, x]."""
        nx, ny, nz = self.dims
        return self.data.reshape(nz, ny, nx)

    def flat_index(self, x: int, y: int, z: int) -> int:
        nx, ny, _ = self.dims
        return x + nx * (y + ny * z)

    def in_bounds(self, q) -> bool:
        return all(0 <= int(q[a]) < self.dims[a] for a in range(3))


@dataclass(frozen=True)
class LabelVolume:
    """Integer label map sharing Volume's geometry; label 0 is background."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray  # flat integer array, values in [0, class_count)
    class_count: int

    def __post_init__(self):
        nx, ny, nz = self.dims
        if self.labels.ndim != 1 or self.labels.size != nx * ny * nz:
            raise ValueError(
                f"label length {self.labels.size} does not match dims {self.dims}"
            )
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise ValueError(
                f"label {int(self.labels.max())} out of range for C={self.class_count}"
            )
        if self.labels.size and int(self.labels.min()) < 0:
            raise ValueError("negative label")

    def as_3d(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return self.labels.reshape(nz, ny, nx)

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)


def normalize_intensity(v: Volume) -> Volume:
    """Map HU to [0, 1] by clamping to [-1024, 3071]; NaN becomes 0.0 (air)."""
    x = np.nan_to_num(v.data.astype(np.float32), nan=HU_MIN)
    x = np.clip(x, HU_MIN, HU_MAX)
    out = (x - HU_MIN) / (HU_MAX - HU_MIN)
    return Volume(v.dims, v.spacing, out.astype(np.float32))


def denormalize_intensity(x: np.ndarray) -> np.ndarray:
    """Inverse of the normalization map on [0, 1] values."""
    return x * (HU_MAX - HU_MIN) + HU_MIN


# ---------------------------------------------------------------------------
# Raw format: a structured text header plus a sibling little-endian payload.
# On disk the header is "<stem>.svh" and the payload "<stem>.svd".


def format_raw_header(v: Volume, kind: str = "volume", classes: int | None = None) -> str:
    lines = [
        "SPARSESEG_RAW 1",
        f"kind {kind}",
        f"dims {v.dims[0]} {v.dims[1]} {v.dims[2]}",
        f"spacing {v.spacing[0]!r} {v.spacing[1]!r} {v.spacing[2]!r}",
        "dtype f32le" if kind == "volume" else "dtype i32le",
        "order x-fastest",
    ]
    if classes is not None:
        lines.append(f"classes {classes}")
    return "\n".join(lines) + "\n"


def _parse_raw_header(header: str) -> dict:
    lines = [ln for ln in header.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("SPARSESEG_RAW"):
        raise RawFormatError("missing SPARSESEG_RAW magic line")
    fields = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        fields[key] = rest
    try:
        fields["dims"] = tuple(int(t) for t in fields["dims"].split())
        fields["spacing"] = tuple(float(t) for t in fields["spacing"].split())
    except (KeyError, ValueError) as e:
        raise RawFormatError(f"bad header field: {e}") from e
    return fields


def load_raw(header: str, data: bytes) -> Volume:
    """Decode a volume from its text header and f32le payload bytes."""
    fields = _parse_raw_header(header)
    if fields.get("dtype") != "f32le":
        raise RawFormatError(f"unsupported dtype {fields.get('dtype')!r}")
    dims = fields["dims"]
    n = dims[0] * dims[1] * dims[2]
    if len(data) != 4 * n:
        raise RawFormatError(f"payload has {len(data) // 4} values, dims declare {n}")
    return Volume(dims, fields["spacing"], np.frombuffer(data, dtype="<f4").copy())


def load_raw_labels(header: str, data: bytes) -> LabelVolume:
    fields = _parse_raw_header(header)
    if fields.get("dtype") != "i32le":
        raise RawFormatError(f"unsupported dtype {fields.get('dtype')!r}")
    dims = fields["dims"]
    n = dims[0] * dims[1] * dims[2]
    if len(data) != 4 * n:
        raise RawFormatError(f"payload has {len(data) // 4} values, dims declare {n}")
    classes = int(fields.get("classes", 0)) or int(
        np.frombuffer(data, dtype="<i4").max() + 1
    )
    return LabelVolume(dims, fields["spacing"], np.frombuffer(data, dtype="<i4").copy(), classes)


def save_raw_path(v: Volume, stem: str | Path) -> None:
    stem = Path(stem)
    stem.with_suffix(".svh").write_text(format_raw_header(v))
    stem.with_suffix(".svd").write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def load_raw_path(stem: str | Path) -> Volume:
    stem = Path(stem)
    return load_raw(stem.with_suffix(".svh").read_text(), stem.with_suffix(".svd").read_bytes())


def save_raw_labels_path(l: LabelVolume, stem: str | Path) -> None:
    stem = Path(stem)
    fake = Volume(l.dims, l.spacing, np.zeros(l.labels.size, np.float32))
    stem.with_suffix(".svh").write_text(
        format_raw_header(fake, kind="labels", classes=l.class_count)
    )
    stem.with_suffix(".svd").write_bytes(
        np.ascontiguousarray(l.labels, dtype="<i4").tobytes()
    )


def load_raw_labels_path(stem: str | Path) -> LabelVolume:
    stem = Path(stem)
    return load_raw_labels(
        stem.with_suffix(".svh").read_text(), stem.with_suffix(".svd").read_bytes()
    )


def dataset_split(ids: list, seed: int, ratio: float = 0.9) -> tuple[list, list]:
    """Deterministic shuffle-then-split into train/test (9:1 by default)."""
    if len(ids) < 2:
        raise ValueError("need at least 2 ids to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_train = int(np.floor(ratio * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train = [ids[i] for i in order[:n_train]]
    test = [ids[i] for i in order[n_train:]]
    return train, test
