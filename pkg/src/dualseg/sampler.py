"""Patch extraction: class-balanced training batches, augmentation, tiling.

Volumes are plain ``[X, Y, Z]`` arrays here; anything outside a volume reads
as zero intensity / background label.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PAPER_RF = {"local": 21, "global": 53}


def extract_patch(volume, center, extent, fill=0):
    """Cube of side ``extent`` around ``center``, zero-padded past the edges."""
    volume = np.asarray(volume)
    start = np.asarray(center, dtype=int) - extent // 2
    out = np.full((extent,) * 3, fill, dtype=volume.dtype)
    src, dst = [], []
    for s, dim in zip(start, volume.shape):
        lo, hi = max(s, 0), min(s + extent, dim)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = volume[tuple(src)]
    return out


def center_crop(patch, extent):
    """Centered crop of the trailing three axes."""
    off = (patch.shape[-1] - extent) // 2
    if off < 0 or (patch.shape[-1] - extent) % 2:
        raise ValueError(f"cannot center-crop {patch.shape[-1]} to {extent}")
    return patch[..., off:off + extent, off:off + extent, off:off + extent]


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    enabled: bool = True
    max_rotation_deg: float = 10.0
    scale_range: tuple = (0.8, 1.2)
    probability: float = 0.5  # applied independently to rotation and scaling
    in_plane_only: bool = False

    def draw(self, rng: np.random.Generator):
        """Random ``(angles_deg, scale)``; identity when disabled or not drawn."""
        angles = np.zeros(3)
        scale = 1.0
        if not self.enabled:
            return angles, scale
        if rng.random() < self.probability:
            r = self.max_rotation_deg
            angles = rng.uniform(-r, r, size=3)
            if self.in_plane_only:
                angles[:2] = 0.0
        if rng.random() < self.probability:
            scale = float(rng.uniform(*self.scale_range))
        return angles, scale


def rotation_matrix(angles_deg):
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def output_to_source(angles_deg, scale):
    """Matrix taking output offsets (from the patch center) to source offsets."""
    return rotation_matrix(angles_deg).T / scale


def source_extent(matrix, out_extent):
    """Odd source cube side that covers every sample of an ``out_extent`` cube."""
    half = (out_extent - 1) / 2
    reach = np.abs(matrix).sum(axis=1).max() * half
    ext = 2 * int(np.ceil(reach - 1e-9)) + 1
    if not np.allclose(matrix, np.eye(3)):
        ext += 4  # trilinear support plus rounding slack
    return max(ext, out_extent)


def resample(source, matrix, out_extent, order):
    """Resample a centered cube through ``matrix`` (about both centers)."""
    if np.array_equal(matrix, np.eye(3)) and source.shape[0] == out_extent:
        return source.copy()
    c_src = (np.asarray(source.shape) - 1) / 2
    c_out = np.full(3, (out_extent - 1) / 2)
    offset = c_src - matrix @ c_out
    return ndimage.affine_transform(source, matrix, offset=offset, output_shape=(out_extent,) * 3,
                                    order=order, mode="constant", cval=0, prefilter=False)


def augment(image, labels, params: AugmentParams, rng: np.random.Generator):
    """Rotate/scale an image patch and its same-sized label patch about the
    center. Intensities are trilinear, labels nearest-neighbour, and anything
    pulled from outside the patch is zero/background."""
    angles, scale = params.draw(rng)
    return apply_transform(image, labels, angles, scale)


def apply_transform(image, labels, angles_deg, scale):
    m = output_to_source(angles_deg, scale)
    if np.allclose(angles_deg, 0) and scale == 1.0:
        m = np.eye(3)
    img = resample(np.asarray(image), m, image.shape[0], order=1).astype(image.dtype, copy=False)
    lab = None
    if labels is not None:
        lab = resample(np.asarray(labels), m, labels.shape[0], order=0).astype(labels.dtype, copy=False)
    return img, lab


# -- balanced sampling --------------------------------------------------------

@dataclass
class PatchBatch:
    global_patches: np.ndarray  # [B, 1, G, G, G]
    local_patches: np.ndarray   # [B, 1, L, L, L]
    targets: np.ndarray         # [B, T, T, T]
    centers: np.ndarray         # [B, 3]
    volume_ids: np.ndarray      # [B]

    def __len__(self):
        return len(self.centers)


class MissingClassError(ValueError):
    pass


class BalancedSampler:
    """Draws patch centers so that every class is equally likely to sit at
    the center: pick a class uniformly, then a voxel of that class uniformly
    (pooled over all volumes)."""

    def __init__(self, images, labelmaps, num_classes, global_extent=59, local_extent=27,
                 target_extent=7, augment: AugmentParams | None = None):
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images, labelmaps = [images], [labelmaps]
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        self.labelmaps = [np.asarray(lm) for lm in labelmaps]
        self.num_classes = num_classes
        self.global_extent = global_extent
        self.local_extent = local_extent
        self.target_extent = target_extent
        self.augment = augment
        self._index = []
        missing = []
        for c in range(num_classes):
            vids, flat = [], []
            for v, lm in enumerate(self.labelmaps):
                idx = np.flatnonzero(lm == c)
                flat.append(idx)
                vids.append(np.full(idx.size, v, dtype=np.int32))
            flat, vids = np.concatenate(flat), np.concatenate(vids)
            if flat.size == 0:
                missing.append(c)
            self._index.append((vids, flat))
        if missing:
            raise MissingClassError(f"class(es) {missing} absent from every label map")

    def draw_centers(self, n, rng):
        classes = rng.integers(self.num_classes, size=n)
        vids = np.empty(n, dtype=np.int32)
        centers = np.empty((n, 3), dtype=np.int64)
        for i, c in enumerate(classes):
            vol_ids, flat = self._index[c]
            j = rng.integers(flat.size)
            vids[i] = vol_ids[j]
            centers[i] = np.unravel_index(flat[j], self.labelmaps[vids[i]].shape)
        return classes, vids, centers

    def sample(self, batch_size, rng: np.random.Generator, augment_rng=None) -> PatchBatch:
        _, vids, centers = self.draw_centers(batch_size, rng)
        g, t = self.global_extent, self.target_extent
        gp = np.empty((batch_size, 1, g, g, g), dtype=np.float32)
        tg = np.empty((batch_size, t, t, t), dtype=np.int64)
        for i, (v, c) in enumerate(zip(vids, centers)):
            image, labels = self.images[v], self.labelmaps[v]
            if self.augment is not None and self.augment.enabled:
                angles, scale = self.augment.draw(augment_rng if augment_rng is not None else rng)
                gp[i, 0], tg[i] = self._augmented(image, labels, c, angles, scale)
            else:
                gp[i, 0] = extract_patch(image, c, g)
                tg[i] = extract_patch(labels, c, t)
        lp = center_crop(gp, self.local_extent).copy()
        return PatchBatch(gp, lp, tg, centers, vids)

    def _augmented(self, image, labels, center, angles, scale):
        g, t = self.global_extent, self.target_extent
        if np.allclose(angles, 0) and scale == 1.0:
            return extract_patch(image, center, g), extract_patch(labels, center, t)
        m = output_to_source(angles, scale)
        src = extract_patch(image, center, source_extent(m, g))
        lsrc = extract_patch(labels, center, source_extent(m, t))
        return resample(src, m, g, order=1), resample(lsrc, m, t, order=0)


def sample_balanced(volume, labelmap, batch_size, rng, num_classes=None, **kwargs) -> PatchBatch:
    """One-shot balanced batch from a volume (or lists of volumes)."""
    if num_classes is None:
        lms = [labelmap] if np.ndim(labelmap) == 3 else labelmap
        num_classes = int(max(np.max(lm) for lm in lms)) + 1
    return BalancedSampler(volume, labelmap, num_classes, **kwargs).sample(batch_size, rng)


# -- dense inference tiling ---------------------------------------------------

@dataclass
class Tile:
    origin: tuple                # first output voxel in volume coordinates
    block: int                   # side of the output block the network yields
    patches: dict                # pathway name -> input patch [1, E, E, E]

    def placement(self, dims):
        """Volume slices this tile writes, and the matching block slices."""
        vol = tuple(slice(o, min(o + self.block, d)) for o, d in zip(self.origin, dims))
        blk = tuple(slice(0, s.stop - s.start) for s in vol)
        return vol, blk


def tile_origins(dims, block):
    return list(itertools.product(*[range(0, d, block) for d in dims]))


def tile_for_inference(volume, global_extent=105, receptive_fields=None):
    """Yield :class:`Tile` s whose output blocks cover ``volume`` exactly once.

    The output block side is ``global_extent - rf_global + 1`` (53 for the
    default 105 / 53); every pathway gets the patch of side
    ``block + rf - 1`` centered on the block.
    """
    rfs = dict(PAPER_RF if receptive_fields is None else receptive_fields)
    block = global_extent - rfs.get("global", PAPER_RF["global"]) + 1
    if block < 1:
        raise ValueError("inference patch smaller than the global receptive field")
    volume = np.asarray(volume, dtype=np.float32)
    for origin in tile_origins(volume.shape, block):
        center = tuple(o + block // 2 for o in origin)
        patches = {name: extract_patch(volume, center, block + rf - 1)[None]
                   for name, rf in rfs.items()}
        yield Tile(origin, block, patches)


def reassemble(predictions, dims):
    """Stitch ``(block [C, b, b, b], Tile)`` pairs into a ``[C, *dims]`` map.

    Raises if any voxel would be written twice or left unwritten.
    """
    out = None
    hits = np.zeros(dims, dtype=np.int32)
    for block, tile in predictions:
        block = np.asarray(block)
        if out is None:
            out = np.zeros((block.shape[0], *dims), dtype=block.dtype)
        vol, blk = tile.placement(dims)
        if np.any(hits[vol]):
            raise ValueError(f"tile at {tile.origin} overlaps an earlier tile")
        hits[vol] += 1
        out[(slice(None),) + vol] = block[(slice(None),) + blk]
    if out is None or not np.all(hits == 1):
        raise ValueError("predictions leave voxels uncovered")
    return out
