"""Overlap (Dice) and surface-distance (ASSD) agreement between label maps.

Undefined values (a class absent from both maps for Dice, or from either map
for ASSD) are NaN and are skipped by the macro averages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _check_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")


def dice(auto, manual, c) -> float:
    auto, manual = np.asarray(auto), np.asarray(manual)
    _check_dims(auto, manual)
    a, m = auto == c, manual == c
    denom = int(a.sum()) + int(m.sum())
    if denom == 0:
        return math.nan
    return 2.0 * int(np.logical_and(a, m).sum()) / denom


def extract_surface(mask):
    """Foreground voxels with a 6-neighbour in the background (outside the
    array counts as background). Returns a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    inner = ndimage.binary_erosion(mask, structure=SIX_CONNECTED, border_value=0)
    return mask & ~inner


def _sampling(voxel_size):
    return tuple(np.broadcast_to(np.asarray(voxel_size, dtype=float), (3,)))


def assd(auto, manual, c, voxel_size=1.0) -> float:
    """Average symmetric surface distance (in the units of ``voxel_size``).

    Each surface's distances to the other surface are read off an exact
    Euclidean distance transform.
    """
    auto, manual = np.asarray(auto), np.asarray(manual)
    _check_dims(auto, manual)
    sa, sm = extract_surface(auto == c), extract_surface(manual == c)
    if not sa.any() or not sm.any():
        return math.nan
    spacing = _sampling(voxel_size)
    to_m = ndimage.distance_transform_edt(~sm, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    total = to_m[sa].sum() + to_a[sm].sum()
    return float(total / (sa.sum() + sm.sum()))


@dataclass
class ClassMetrics:
    class_id: int
    name: str
    dsc: float
    assd: float
    auto_voxels: int
    manual_voxels: int


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    voxel_size: tuple = (1.0, 1.0, 1.0)

    @property
    def mean_dsc(self) -> float:
        vals = [r.dsc for r in self.rows if not math.isnan(r.dsc)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_assd(self) -> float:
        vals = [r.assd for r in self.rows if not math.isnan(r.assd)]
        return float(np.mean(vals)) if vals else math.nan

    def defined_count(self, metric="dsc") -> int:
        return sum(not math.isnan(getattr(r, metric)) for r in self.rows)

    def to_text(self) -> str:
        lines = ["class\tname\tdsc\tassd_mm\tauto_voxels\tmanual_voxels"]
        for r in self.rows:
            lines.append(f"{r.class_id}\t{r.name}\t{_fmt(r.dsc)}\t{_fmt(r.assd)}\t"
                         f"{r.auto_voxels}\t{r.manual_voxels}")
        lines.append(f"mean\tmacro(n_dsc={self.defined_count('dsc')},n_assd={self.defined_count('assd')})\t"
                     f"{_fmt(self.mean_dsc)}\t{_fmt(self.mean_assd)}\t"
                     f"{sum(r.auto_voxels for r in self.rows)}\t{sum(r.manual_voxels for r in self.rows)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text) -> "MetricReport":
        rows = []
        for line in text.strip().splitlines()[1:]:
            cid, name, d, a, na, nm = line.split("\t")
            if cid == "mean":
                continue
            rows.append(ClassMetrics(int(cid), name, _parse(d), _parse(a), int(na), int(nm)))
        return cls(rows)


def _fmt(v):
    return "undefined" if math.isnan(v) else repr(float(v))


def _parse(s):
    return math.nan if s == "undefined" else float(s)


def report(auto, manual, voxel_size=1.0, num_classes=None, class_names=None) -> MetricReport:
    """Per-foreground-class DSC/ASSD plus macro means."""
    auto, manual = np.asarray(auto), np.asarray(manual)
    _check_dims(auto, manual)
    top = int(max(auto.max(initial=0), manual.max(initial=0)))
    if num_classes is None:
        num_classes = top + 1
    elif top >= num_classes or min(auto.min(initial=0), manual.min(initial=0)) < 0:
        bad = sorted((set(np.unique(auto).tolist()) | set(np.unique(manual).tolist())) - set(range(num_classes)))
        raise ValueError(f"labels {bad} fall outside the {num_classes}-class alphabet")
    names = class_names or [f"class_{c}" for c in range(num_classes)]
    rows = []
    for c in range(1, num_classes):
        rows.append(ClassMetrics(c, names[c], dice(auto, manual, c), assd(auto, manual, c, voxel_size),
                                 int((auto == c).sum()), int((manual == c).sum())))
    return MetricReport(rows, _sampling(voxel_size))
