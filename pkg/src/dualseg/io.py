"""Volume files and checkpoints.

Volume file layout (all little-endian)::

    magic        8 bytes  b"DSEGVOL1"
    dims         3 x uint32 (x, y, z)
    voxel_size   3 x float64 (mm)
    kind         uint8    0 = float32 image, 1 = uint8 labels
    num_classes  uint16   0 for images
    payload      prod(dims) values, x fastest

Checkpoints are uncompressed zip archives with fixed timestamps so that
identical state gives identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import AdamState, BatchNormStats

MAGIC = b"DSEGVOL1"
HEADER = struct.Struct("<8s3I3dBH")
KIND_IMAGE, KIND_LABELS = 0, 1
CHECKPOINT_VERSION = 1


class DataError(ValueError):
    """A data file is missing, truncated or inconsistent."""


@dataclass
class Volume:
    data: np.ndarray                     # [X, Y, Z] float32
    voxel_size: tuple = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelMap:
    data: np.ndarray                     # [X, Y, Z] uint8
    num_classes: int
    voxel_size: tuple = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return self.data.shape


def _vs(voxel_size):
    return tuple(float(v) for v in np.broadcast_to(np.asarray(voxel_size, dtype=float), (3,)))


def write_volume(path, vol):
    """Write a :class:`Volume` or :class:`LabelMap`."""
    if isinstance(vol, LabelMap):
        data = np.asarray(vol.data)
        if data.size and (data.min() < 0 or data.max() >= vol.num_classes):
            raise DataError(f"labels outside [0, {vol.num_classes})")
        payload = data.astype("<u1").tobytes(order="F")
        kind, ncls = KIND_LABELS, vol.num_classes
    else:
        data = np.asarray(vol.data)
        if not np.all(np.isfinite(data)):
            raise DataError("image contains non-finite values")
        payload = data.astype("<f4").tobytes(order="F")
        kind, ncls = KIND_IMAGE, 0
    if data.ndim != 3:
        raise DataError(f"volumes are 3D, got shape {data.shape}")
    header = HEADER.pack(MAGIC, *data.shape, *_vs(vol.voxel_size), kind, ncls)
    Path(path).write_bytes(header + payload)


def read_volume(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(raw) < HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, nx, ny, nz, vx, vy, vz, kind, ncls = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: not a volume file")
    dims = (nx, ny, nz)
    width = {KIND_IMAGE: 4, KIND_LABELS: 1}.get(kind)
    if width is None:
        raise DataError(f"{path}: unknown element kind {kind}")
    payload = raw[HEADER.size:]
    if len(payload) != nx * ny * nz * width:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {nx * ny * nz * width}")
    if kind == KIND_IMAGE:
        data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)
        return Volume(data, (vx, vy, vz))
    data = np.frombuffer(payload, dtype="<u1").reshape(dims, order="F").astype(np.uint8)
    if data.size and data.max() >= ncls:
        raise DataError(f"{path}: label {int(data.max())} >= class count {ncls}")
    return LabelMap(data, int(ncls), (vx, vy, vz))


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    params: dict
    bn: dict
    adam: AdamState | None = None
    iteration: int = 0
    history: list = field(default_factory=list)      # validation records
    loss_log: list = field(default_factory=list)     # per-iteration losses
    rng_states: dict = field(default_factory=dict)
    best_params: dict | None = None
    best_bn: dict | None = None
    version: int = CHECKPOINT_VERSION


_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _put(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy(arr) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _put_bn(zf, prefix, bn):
    counts = {}
    for k in sorted(bn):
        _put(zf, f"{prefix}/{k}.mean.npy", _npy(bn[k].mean))
        _put(zf, f"{prefix}/{k}.var.npy", _npy(bn[k].var))
        counts[k] = bn[k].count
    return counts


def save_checkpoint(path, ckpt: Checkpoint):
    meta = {
        "version": ckpt.version,
        "config": ckpt.config,
        "iteration": ckpt.iteration,
        "history": ckpt.history,
        "loss_log": [repr(float(x)) for x in ckpt.loss_log],
        "rng_states": ckpt.rng_states,
        "param_names": sorted(ckpt.params),
        "has_best": ckpt.best_params is not None,
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for k in sorted(ckpt.params):
            _put(zf, f"params/{k}.npy", _npy(ckpt.params[k]))
        meta["bn_counts"] = _put_bn(zf, "bn", ckpt.bn)
        if ckpt.best_params is not None:
            for k in sorted(ckpt.best_params):
                _put(zf, f"best_params/{k}.npy", _npy(ckpt.best_params[k]))
            meta["best_bn_counts"] = _put_bn(zf, "best_bn", ckpt.best_bn)
        if ckpt.adam is not None:
            a = ckpt.adam
            meta["adam"] = {"learning_rate": a.learning_rate, "beta1": a.beta1, "beta2": a.beta2,
                            "epsilon": a.epsilon, "step": a.step, "names": sorted(a.m)}
            for k in sorted(a.m):
                _put(zf, f"adam_m/{k}.npy", _npy(a.m[k]))
                _put(zf, f"adam_v/{k}.npy", _npy(a.v[k]))
        _put(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())


def _load_npy(zf, name):
    with zf.open(name) as f:
        return np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)


def _load_bn(zf, prefix, counts):
    return {k: BatchNormStats(_load_npy(zf, f"{prefix}/{k}.mean.npy"),
                              _load_npy(zf, f"{prefix}/{k}.var.npy"), int(c))
            for k, c in counts.items()}


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise DataError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError as e:
            raise DataError(f"{path}: checkpoint has no metadata") from e
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: checkpoint version {meta.get('version')} "
                            f"!= supported {CHECKPOINT_VERSION}")
        try:
            params = {k: _load_npy(zf, f"params/{k}.npy") for k in meta["param_names"]}
            bn = _load_bn(zf, "bn", meta["bn_counts"])
            best_params = best_bn = None
            if meta["has_best"]:
                best_params = {k: _load_npy(zf, f"best_params/{k}.npy") for k in meta["param_names"]}
                best_bn = _load_bn(zf, "best_bn", meta["best_bn_counts"])
            adam = None
            if "adam" in meta:
                a = meta["adam"]
                adam = AdamState(a["learning_rate"], a["beta1"], a["beta2"], a["epsilon"], a["step"],
                                 {k: _load_npy(zf, f"adam_m/{k}.npy") for k in a["names"]},
                                 {k: _load_npy(zf, f"adam_v/{k}.npy") for k in a["names"]})
        except (KeyError, ValueError, zipfile.BadZipFile) as e:
            raise DataError(f"{path}: corrupt checkpoint ({e})") from e
    return Checkpoint(meta["config"], params, bn, adam, meta["iteration"], meta["history"],
                      [float(x) for x in meta["loss_log"]], meta["rng_states"],
                      best_params, best_bn, meta["version"])
