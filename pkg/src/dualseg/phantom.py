"""Synthetic head phantoms with a small paired structure per hemisphere.

The image is a zero background with an ellipsoidal "head" of piecewise
constant tissue blobs, a dark midline slab, a dark ventricle medial to each
structure, and the two structures themselves (slightly brighter than tissue,
each cut into subregions of different contrast by oblique planes).
With ``anomaly`` set, a bright lesion medial to the left structure pushes
it laterally. Label modes:

* 3 classes: background, left structure, right structure
* 9 classes: background + 4 subregions per side
* 11 classes: background + 5 subregions per side (one quadrant split again)
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .io import LabelMap, Volume
from .sampler import rotation_matrix

TISSUE_LEVELS = (0.40, 0.50, 0.60)
CSF_LEVEL = 0.15
ANOMALY_LEVEL = 0.9  # brighter than any tissue or structure, so out of distribution


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (96, 96, 96)
    num_classes: int = 3
    foreground_fraction: float = 0.005
    noise_sigma: float = 0.02
    contrast_range: tuple = (0.05, 0.15)  # structure brightness over tissue, per subregion
    tissue_blobs: int = 12
    jitter: float = 3.0                   # voxels of random structure displacement
    anomaly: bool = False                 # bright lesion pushing the left structure laterally
    voxel_size: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes not in (3, 9, 11):
            raise ValueError("phantoms come in 3, 9 or 11 classes")
        if min(self.dims) < 24:
            raise ValueError(f"phantom dims {self.dims} too small (need >= 24 per axis)")
        if not 0 < self.foreground_fraction < 0.2:
            raise ValueError("foreground fraction must be in (0, 0.2)")


def _ellipsoid_coords(shape, center, axes, rot):
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1).T - np.asarray(center)
    local = grid @ rot  # coordinates in the ellipsoid frame
    return local, (local / np.asarray(axes)) ** 2


def _subregion_index(local, n_sub, normals):
    side_a = local @ normals[0] > 0
    side_b = local @ normals[1] > 0
    q = side_a.astype(int) * 2 + side_b.astype(int)
    if n_sub == 5:
        q = np.where((q == 3) & (local @ normals[2] > 0), 4, q)
    return q


def _carve(shape, center, axes, rot, target):
    """Scale ``axes`` so the voxelized ellipsoid has about ``target`` voxels."""
    scale = 1.0
    for _ in range(30):
        local, r2 = _ellipsoid_coords(shape, center, np.asarray(axes) * scale, rot)
        count = int((r2.sum(axis=1) <= 1).sum())
        if count == 0:
            scale *= 1.5
            continue
        err = target / count
        if abs(err - 1) < 0.01:
            break
        scale *= err ** (1 / 3)
    return local, r2.sum(axis=1) <= 1, np.asarray(axes) * scale


def generate(spec: PhantomSpec):
    """Return ``(Volume, LabelMap)`` for ``spec``; deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    dims = tuple(int(d) for d in spec.dims)
    nvox = int(np.prod(dims))
    mid = (np.asarray(dims) - 1) / 2
    img = np.zeros(nvox)

    head_axes = np.asarray(dims) * 0.46
    grid = np.indices(dims, dtype=np.float64).reshape(3, -1).T
    head = (((grid - mid) / head_axes) ** 2).sum(axis=1) <= 1
    img[head] = TISSUE_LEVELS[1]
    for _ in range(spec.tissue_blobs):
        c = mid + rng.uniform(-0.6, 0.6, 3) * head_axes
        r = rng.uniform(0.08, 0.2) * min(dims)
        blob = (((grid - c) / r) ** 2).sum(axis=1) <= 1
        img[blob & head] = rng.choice(TISSUE_LEVELS)
    midline = head & (np.abs(grid[:, 0] - mid[0]) <= 1.0)
    img[midline] = CSF_LEVEL

    labels = np.zeros(nvox, dtype=np.uint8)
    n_sub = {3: 1, 9: 4, 11: 5}[spec.num_classes]
    per_side = spec.foreground_fraction * nvox / 2
    r_nominal = (3 * per_side / (4 * np.pi)) ** (1 / 3)
    lo, hi = spec.contrast_range
    contrasts = np.linspace(lo, hi, 5 if n_sub == 5 else 4)
    for side, sign in ((0, -1), (1, 1)):
        offset = max(0.22 * dims[0], 2.2 * r_nominal + 4)
        center = mid + np.array([sign * offset, 0.0, 0.0]) + rng.uniform(-1, 1, 3) * spec.jitter
        if spec.anomaly and side == 0:
            center = center + np.array([-1.2 * r_nominal, 0, 0])
        ratios = np.array([1.25, 1.0, 0.8]) * rng.uniform(0.9, 1.1, 3)
        axes = r_nominal * ratios / np.prod(ratios) ** (1 / 3)
        angles = rng.uniform(-15, 15, 3)
        angles[2] *= sign  # mirror the in-plane tilt between hemispheres
        rot = rotation_matrix(angles)
        local, inside, axes = _carve(dims, center, axes, rot, per_side)
        # ventricle just medial of the structure
        vc = center - np.array([sign * (axes[0] + 0.9 * r_nominal + 1.5), 0, 0])
        vent = (((grid - vc) / (np.array([0.6, 1.4, 1.0]) * r_nominal)) ** 2).sum(axis=1) <= 1
        img[vent & head & ~inside] = CSF_LEVEL
        normals = [n / np.linalg.norm(n) for n in (np.array([1.0, 0.6, 0.2]),
                                                     np.array([-0.3, 1.0, 0.5]),
                                                     np.array([0.4, -0.2, 1.0]))]
        sub = _subregion_index(local, 5 if n_sub == 5 else 4, normals)
        base = TISSUE_LEVELS[1]
        img[inside] = base + contrasts[np.minimum(sub[inside], len(contrasts) - 1)]
        if n_sub == 1:
            labels[inside] = side + 1
        else:
            labels[inside] = 1 + side * n_sub + np.minimum(sub[inside], n_sub - 1)
        if spec.anomaly and side == 0:
            lesion_c = center + np.array([axes[0] + 0.9 * r_nominal, 0, 0])
            lesion = (((grid - lesion_c) / (0.9 * r_nominal)) ** 2).sum(axis=1) <= 1
            img[lesion & head & ~inside] = ANOMALY_LEVEL

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, nvox)
    vs = (spec.voxel_size,) * 3
    return (Volume(img.reshape(dims).astype(np.float32), vs),
            LabelMap(labels.reshape(dims), spec.num_classes, vs))


def phantom_set(spec: PhantomSpec, n_train=4, n_val=1, n_test=1):
    """Independent phantoms (seeds ``spec.seed + i``) split train / val / test."""
    vols = [generate(replace(spec, seed=spec.seed + i)) for i in range(n_train + n_val + n_test)]
    return vols[:n_train], vols[n_train:n_train + n_val], vols[n_train + n_val:]
