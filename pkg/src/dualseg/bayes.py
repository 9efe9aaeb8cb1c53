"""Monte-Carlo dropout segmentation of whole volumes.

Each pass tiles the volume, runs every tile through the network with fresh
dropout masks, and stitches the softmax blocks back together. Passes are
folded into a running (Welford) mean and variance per class and voxel.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor_core as tc
from .metrics import SIX_CONNECTED
from .network import Network
from .sampler import reassemble, tile_for_inference


@dataclass(frozen=True)
class InferenceConfig:
    mc_samples: int = 20
    dropout: float = 0.3
    seed: int = 0
    tile_extent: int = 105

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("need at least one Monte-Carlo sample")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must be in [0, 1)")


@dataclass
class UncertaintyOutput:
    mean: np.ndarray           # [C, X, Y, Z] mean softmax
    labels: np.ndarray         # [X, Y, Z] argmax of mean
    class_variance: np.ndarray  # [C, X, Y, Z] unbiased sample variance
    variance: np.ndarray       # [X, Y, Z] class_variance summed over classes
    samples: int
    degenerate: bool = False   # True when N == 1 and the variance is not defined


def _tiles(net: Network, volume, tile_extent):
    rfs = {p: net.spec.pathway(p).receptive_field for p in net.spec.active}
    if "global" not in rfs:
        # single local pathway: size blocks as if the global field were present
        rfs_for_block = dict(rfs, **{"global": net.spec.global_.receptive_field})
        tiles = list(tile_for_inference(volume, tile_extent, rfs_for_block))
        for t in tiles:
            t.patches.pop("global")
        return tiles
    return list(tile_for_inference(volume, tile_extent, rfs))


def dense_probabilities(net: Network, volume, mode="deterministic", tile_extent=105,
                        rng_for_tile=None, tiles=None):
    """Softmax map ``[C, X, Y, Z]`` of one full-volume pass."""
    volume = np.asarray(volume, dtype=np.float32)
    tiles = tiles if tiles is not None else _tiles(net, volume, tile_extent)
    blocks = []
    for i, tile in enumerate(tiles):
        rng = rng_for_tile(i) if rng_for_tile is not None else None
        logits = net.forward(tile.patches.get("local"), tile.patches.get("global"), mode, rng)
        blocks.append((tc.softmax_channels(logits), tile))
    return reassemble(blocks, volume.shape)


def segment(net: Network, volume, tile_extent=105):
    """Deterministic (no dropout) segmentation: ``(labels, probabilities)``."""
    probs = dense_probabilities(net, volume, "deterministic", tile_extent)
    return probs.argmax(axis=0).astype(np.uint8), probs


def mc_segment(net: Network, volume, config: InferenceConfig = InferenceConfig(),
               timings: list | None = None) -> UncertaintyOutput:
    """N stochastic passes; mean is the segmentation, variance the uncertainty.

    Dropout masks are redrawn for every pass and every tile from a generator
    seeded with ``(seed, pass, tile)``, so the result does not depend on the
    order in which tiles or passes are evaluated.
    """
    if net is None or not net.params:
        raise ValueError("mc_segment needs trained parameters")
    n = config.mc_samples
    mc_net = Network(net.spec.with_(dropout=config.dropout), net.params, net.bn)
    volume = np.asarray(volume, dtype=np.float32)
    tiles = _tiles(mc_net, volume, config.tile_extent)
    mean = m2 = None
    for k in range(1, n + 1):
        t0 = time.perf_counter()
        probs = dense_probabilities(
            mc_net, volume, "mc_sample", config.tile_extent,
            rng_for_tile=lambda i, k=k: np.random.default_rng([config.seed, k, i]),
            tiles=tiles).astype(np.float64)
        if mean is None:
            mean = probs
            m2 = np.zeros_like(probs)
        else:
            delta = probs - mean
            mean += delta / k
            m2 += delta * (probs - mean)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
    degenerate = n == 1
    if degenerate:
        warnings.warn("a single Monte-Carlo sample has no variance; reporting zeros", RuntimeWarning)
        class_var = np.zeros_like(mean)
    else:
        class_var = m2 / (n - 1)
    return UncertaintyOutput(
        mean=mean.astype(np.float32),
        labels=mean.argmax(axis=0).astype(np.uint8),
        class_variance=class_var.astype(np.float32),
        variance=class_var.sum(axis=0).astype(np.float32),
        samples=n,
        degenerate=degenerate,
    )


def boundary_band(labels, width=2):
    """Voxels within ``width`` 6-connected steps of a label change."""
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    for ax in range(3):
        diff = np.diff(labels, axis=ax) != 0
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    if width > 0 and edge.any():
        edge = ndimage.binary_dilation(edge, structure=SIX_CONNECTED, iterations=width)
    return edge


def _stats(values):
    if values.size == 0:
        return {"mean": 0.0, "max": 0.0, "voxels": 0}
    return {"mean": float(values.mean(dtype=np.float64)), "max": float(values.max()),
            "voxels": int(values.size)}


def uncertainty_summary(output: UncertaintyOutput, labelmap=None, band_width=2) -> dict:
    """Scalar summaries of the variance map: overall, per predicted class, in
    a band around predicted boundaries and away from it. With a reference
    ``labelmap``, the same band split is also reported around its
    boundaries. No thresholding or verdict is applied."""
    var = output.variance
    band = boundary_band(output.labels, band_width)
    fg = output.labels > 0
    summary = {
        "overall": _stats(var),
        "per_class": {int(c): _stats(var[output.labels == c]) for c in np.unique(output.labels)},
        "boundary_band": _stats(var[band]),
        "interior": _stats(var[~band]),
        "foreground_interior": _stats(var[fg & ~band]),
    }
    if labelmap is not None:
        ref_band = boundary_band(labelmap, band_width)
        summary["reference_boundary_band"] = _stats(var[ref_band])
        summary["reference_interior"] = _stats(var[~ref_band])
    return summary
