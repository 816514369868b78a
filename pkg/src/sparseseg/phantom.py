"""Procedural phantom volumes: a soft-tissue body with ellipsoidal organs.

Stands in for CT data at desk scale.  The optional twin pair gives two organs
an identical intensity distribution at mirrored positions, so they can only
be told apart through spatial context.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import LabelVolume, Volume

AIR_HU = -1000.0
BODY_HU = 40.0

# Canonical organ table: (center as fraction of extent from volume center,
# semi-axes as fraction of extent, mean intensity in HU).  The first two rows
# are the twin-pair slots (intensity forced identical when twin_pair is set).
_CANONICAL = [
    ((+0.22, +0.08, +0.10), (0.11, 0.10, 0.12), 280.0),
    ((-0.22, +0.08, +0.10), (0.11, 0.10, 0.12), 280.0),
    ((0.00, -0.16, -0.18), (0.13, 0.11, 0.12), -650.0),
    ((-0.14, +0.16, -0.14), (0.10, 0.09, 0.10), 130.0),
    ((+0.13, -0.14, +0.16), (0.09, 0.10, 0.09), 520.0),
    ((-0.10, -0.12, +0.18), (0.08, 0.08, 0.08), -300.0),
    ((+0.05, +0.20, -0.05), (0.08, 0.07, 0.08), 700.0),
    ((-0.05, -0.02, 0.00), (0.07, 0.07, 0.07), 90.0),
]

_BODY_SEMI = (0.42, 0.40, 0.45)  # fraction of extent per axis (x, y, z)


class PhantomError(RuntimeError):
    """Raised when organs cannot be placed inside the body after retries."""


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    organ_count: int = 5
    twin_pair: bool = True
    jitter: float = 6.0        # mm, affine perturbation magnitude
    noise_sigma: float = 25.0  # HU, additive intensity noise
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.organ_count <= len(_CANONICAL):
            raise ValueError(f"organ_count must be in [1, {len(_CANONICAL)}]")
        if self.twin_pair and self.organ_count < 2:
            raise ValueError("twin_pair requires at least 2 organs")

    @property
    def class_count(self) -> int:
        return self.organ_count + 1


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume, LabelVolume]:
    """Deterministically generate one (intensity, label) phantom pair."""
    rng = np.random.default_rng(cfg.seed)
    jitter = cfg.jitter
    last_err = None
    for _ in range(5):
        try:
            return _generate_once(cfg, rng, jitter)
        except PhantomError as e:
            last_err = e
            jitter *= 0.5  # dampened retry
    raise PhantomError(f"organ placement failed after retries: {last_err}")


def _generate_once(cfg: PhantomConfig, rng, jitter: float):
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    extent = np.array([nx * sx, ny * sy, nz * sz])
    center = (extent - np.array(cfg.spacing)) / 2.0

    # voxel-center coordinates in mm, arrays indexed [z, y, x]
    zc = np.arange(nz, dtype=np.float32) * sz
    yc = np.arange(ny, dtype=np.float32) * sy
    xc = np.arange(nx, dtype=np.float32) * sx
    Z, Y, X = np.meshgrid(zc, yc, xc, indexing="ij")

    # shared smooth deformation applied to organ placement
    warp_amp = 0.6 * jitter
    warp = [
        gaussian_filter(rng.standard_normal((nz, ny, nx)).astype(np.float32), 6.0)
        for _ in range(3)
    ]
    warp = [w / (np.abs(w).max() + 1e-9) * warp_amp for w in warp]
    Xw, Yw, Zw = X + warp[0], Y + warp[1], Z + warp[2]

    body_center = center + rng.uniform(-0.4 * jitter, 0.4 * jitter, 3)
    body_semi = np.array(_BODY_SEMI) * extent * rng.uniform(0.96, 1.04, 3)
    body = (
        ((X - body_center[0]) / body_semi[0]) ** 2
        + ((Y - body_center[1]) / body_semi[1]) ** 2
        + ((Z - body_center[2]) / body_semi[2]) ** 2
    ) <= 1.0

    intensity = np.full((nz, ny, nx), AIR_HU, np.float32)
    intensity[body] = BODY_HU
    labels = np.zeros((nz, ny, nx), np.int32)

    twin_hu = _CANONICAL[0][2]
    for k in range(cfg.organ_count):
        frac_c, frac_r, hu = _CANONICAL[k]
        if cfg.twin_pair and k in (0, 1):
            hu = twin_hu  # identical distribution for the pair
        oc = center + np.array(frac_c) * extent
        oc = oc + rng.uniform(-jitter, jitter, 3)
        semi = np.array(frac_r) * extent * rng.uniform(0.88, 1.12, 3)
        mask = (
            ((Xw - oc[0]) / semi[0]) ** 2
            + ((Yw - oc[1]) / semi[1]) ** 2
            + ((Zw - oc[2]) / semi[2]) ** 2
        ) <= 1.0
        mask &= body  # organs never protrude from the body
        if not mask.any():
            raise PhantomError(f"organ {k + 1} fell fully outside the body")
        free = mask & (labels == 0)
        labels[free] = k + 1
        intensity[free] = hu

    intensity += rng.normal(0.0, cfg.noise_sigma, intensity.shape).astype(np.float32)

    vol = Volume(cfg.dims, cfg.spacing, intensity.reshape(-1))
    lab = LabelVolume(cfg.dims, cfg.spacing, labels.reshape(-1), cfg.class_count)
    return vol, lab


def phantom_dataset(cfg: PhantomConfig, count: int, seed: int):
    """Generate `count` phantoms with per-item seeds derived from `seed`."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, count)
    return [generate_phantom(replace(cfg, seed=int(s))) for s in seeds]
