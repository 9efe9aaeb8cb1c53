"""Dual-pathway dilated fully-convolutional network.

A *local* pathway of plain 3^3 convolutions and a *global* pathway of dilated
3^3 convolutions run side by side on two concentric patches of the same
image, meet at equal spatial extent, are concatenated along channels and go
through two 1x1x1 fusion layers (with dropout) and a 1x1x1 classifier.
Either pathway can also be used alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import BatchNormStats, ConvSpec, ShapeError

MODES = ("train", "mc_sample", "deterministic")


def receptive_field(layers) -> int:
    """Receptive field (per axis) of a stack of valid, unit-stride convs.

    ``layers`` is a sequence of :class:`ConvSpec` (or ``(k, D)`` pairs).
    Each layer adds ``(k - 1) * D`` to the field.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("receptive field of an empty stack is undefined")
    rf = 1
    for layer in layers:
        k, d = (layer.kernel_size, layer.dilation) if isinstance(layer, ConvSpec) else layer
        rf += (k - 1) * d
    return rf


@dataclass(frozen=True)
class PathwaySpec:
    name: str
    widths: tuple
    dilations: tuple
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.name not in ("local", "global"):
            raise ValueError(f"pathway name must be 'local' or 'global', not {self.name!r}")
        if not self.widths or len(self.widths) != len(self.dilations):
            raise ValueError(f"{self.name}: need one dilation per layer")
        if min(self.widths) < 1 or min(self.dilations) < 1:
            raise ValueError(f"{self.name}: widths and dilations must be positive")
        if self.name == "local" and any(d != 1 for d in self.dilations):
            raise ValueError("the local pathway is undilated")

    @classmethod
    def paper_local(cls):
        return cls("local", (30, 30, 40, 40, 40, 40, 50, 50, 50, 50), (1,) * 10)

    @classmethod
    def paper_global(cls):
        return cls("global", (30, 30, 40, 40, 40, 40, 50, 50, 50),
                   (1, 2, 4, 2, 8, 2, 4, 2, 1))

    @property
    def convs(self):
        return [ConvSpec(self.kernel_size, d) for d in self.dilations]

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.convs)

    @property
    def shrink(self) -> int:
        return self.receptive_field - 1

    def input_extent(self, out_extent: int) -> int:
        return out_extent + self.shrink


@dataclass(frozen=True)
class NetworkSpec:
    num_classes: int = 3
    pathways: str = "dual"  # dual | local | global
    local: PathwaySpec = field(default_factory=PathwaySpec.paper_local)
    global_: PathwaySpec = field(default_factory=PathwaySpec.paper_global)
    fusion_width: int = 150
    dropout: float = 0.3
    in_channels: int = 1
    prelu_init: float = 0.25

    def __post_init__(self):
        if self.pathways not in ("dual", "local", "global"):
            raise ValueError(f"unknown pathway selection {self.pathways!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes (background included)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.fusion_width < 1 or self.in_channels < 1:
            raise ValueError("fusion width and input channels must be positive")
        if self.local.name != "local" or self.global_.name != "global":
            raise ValueError("pathway specs are in the wrong slots")

    @property
    def active(self) -> tuple:
        return {"dual": ("local", "global"), "local": ("local",), "global": ("global",)}[self.pathways]

    def pathway(self, which) -> PathwaySpec:
        return self.local if which == "local" else self.global_

    def input_extents(self, out_extent: int) -> dict:
        """Patch extent each active pathway needs to yield ``out_extent``."""
        return {p: self.pathway(p).input_extent(out_extent) for p in self.active}

    def output_extent(self, which: str, in_extent: int) -> int:
        return in_extent - self.pathway(which).shrink

    @property
    def fused_channels(self) -> int:
        return sum(self.pathway(p).widths[-1] for p in self.active)

    def with_(self, **changes) -> "NetworkSpec":
        from dataclasses import replace
        return replace(self, **changes)


def thin_spec(width=2, num_classes=3, pathways="dual", dropout=0.3, fusion_width=None,
              local_layers=10, global_dilations=(1, 2, 4, 2, 8, 2, 4, 2, 1)):
    """Same topology with every width set to ``width``; handy for tests."""
    return NetworkSpec(
        num_classes=num_classes,
        pathways=pathways,
        local=PathwaySpec("local", (width,) * local_layers, (1,) * local_layers),
        global_=PathwaySpec("global", (width,) * len(global_dilations), global_dilations),
        fusion_width=fusion_width or width,
        dropout=dropout,
    )


class Network:
    """Parameters plus forward/backward for a :class:`NetworkSpec`.

    ``params`` holds the trainable arrays keyed by layer path (``local.3.w``,
    ``fuse.0.b``, ``cls.w``...); ``bn`` holds the batch-norm running
    statistics keyed by pathway layer (``global.4``).
    """

    def __init__(self, spec: NetworkSpec, params: dict, bn: dict):
        self.spec = spec
        self.params = params
        self.bn = bn
        self._cache = None

    @classmethod
    def build(cls, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> "Network":
        params, bn = {}, {}
        for which in spec.active:
            path = spec.pathway(which)
            cin = spec.in_channels
            for i, width in enumerate(path.widths):
                k = path.kernel_size
                params[f"{which}.{i}.w"] = tc.he_init((width, cin, k, k, k), rng, dtype)
                params[f"{which}.{i}.gamma"] = np.ones(width, dtype)
                params[f"{which}.{i}.beta"] = np.zeros(width, dtype)
                params[f"{which}.{i}.a"] = np.full(width, spec.prelu_init, dtype)
                bn[f"{which}.{i}"] = BatchNormStats.fresh(width, dtype)
                cin = width
        cin = spec.fused_channels
        for j in range(2):
            params[f"fuse.{j}.w"] = tc.he_init((spec.fusion_width, cin, 1, 1, 1), rng, dtype)
            params[f"fuse.{j}.b"] = np.zeros(spec.fusion_width, dtype)
            params[f"fuse.{j}.a"] = np.full(spec.fusion_width, spec.prelu_init, dtype)
            cin = spec.fusion_width
        params["cls.w"] = tc.he_init((spec.num_classes, cin, 1, 1, 1), rng, dtype)
        params["cls.b"] = np.zeros(spec.num_classes, dtype)
        return cls(spec, params, bn)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return self.params["cls.w"].dtype

    # -- forward -----------------------------------------------------------

    def _pathway_forward(self, which, h, training, cache):
        path = self.spec.pathway(which)
        for i, d in enumerate(path.dilations):
            w = self.params[f"{which}.{i}.w"]
            z = tc.conv3d(h, w, d)
            y, bn_cache = tc.batchnorm(z, self.params[f"{which}.{i}.gamma"],
                                       self.params[f"{which}.{i}.beta"],
                                       self.bn[f"{which}.{i}"], training)
            if cache is not None:
                cache[f"{which}.{i}"] = (h, bn_cache)
            h = tc.prelu(y, self.params[f"{which}.{i}.a"])
        return h

    def forward(self, local_patch=None, global_patch=None, mode="deterministic",
                rng: np.random.Generator | None = None):
        """Logits ``[N, C, X', Y', Z']`` (or ``[C, ...]`` for 4D inputs).

        ``mode``: ``train`` uses batch statistics and dropout and keeps the
        activations for :meth:`backward`; ``mc_sample`` uses running
        statistics with dropout; ``deterministic`` uses running statistics
        and no dropout. Pass only the patch(es) of the active pathway(s).
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        stochastic = mode in ("train", "mc_sample") and self.spec.dropout > 0
        if stochastic and rng is None:
            raise ValueError(f"mode {mode!r} needs a random generator")
        training = mode == "train"
        patches = {"local": local_patch, "global": global_patch}
        squeeze = None
        feats = []
        cache = {} if training else None
        for which in self.spec.active:
            x = patches[which]
            if x is None:
                raise ValueError(f"the {which} pathway needs an input patch")
            x = np.asarray(x, dtype=self.dtype)
            if squeeze is None:
                squeeze = x.ndim == 4
            if x.ndim == 4:
                x = x[None]
            if x.shape[1] != self.spec.in_channels:
                raise ShapeError(f"{which} patch has {x.shape[1]} channels, expected {self.spec.in_channels}")
            feats.append(self._pathway_forward(which, x, training, cache))
        for other in ("local", "global"):
            if other not in self.spec.active and patches[other] is not None:
                raise ValueError(f"this network has no {other} pathway")
        if len(feats) == 2:
            if feats[0].shape[2:] != feats[1].shape[2:] or feats[0].shape[0] != feats[1].shape[0]:
                raise ShapeError(
                    f"pathway outputs misaligned: local {feats[0].shape[2:]} vs global {feats[1].shape[2:]}")
            h = tc.concat_channels(feats[0], feats[1])
        else:
            h = feats[0]
        if training:
            cache["concat_split"] = feats[0].shape[1]
        for j in range(2):
            z = tc.conv3d(h, self.params[f"fuse.{j}.w"], 1, bias=self.params[f"fuse.{j}.b"])
            y = tc.prelu(z, self.params[f"fuse.{j}.a"])
            if stochastic:
                out, mask = tc.dropout(y, self.spec.dropout, rng)
            else:
                out, mask = y, None
            if training:
                cache[f"fuse.{j}"] = (h, z, mask)
            h = out
        logits = tc.conv3d(h, self.params["cls.w"], 1, bias=self.params["cls.b"])
        if training:
            cache["cls"] = h
        self._cache = cache
        return logits[0] if squeeze else logits

    # -- backward ----------------------------------------------------------

    def backward(self, grad_logits) -> dict:
        """Parameter gradients given dLoss/dlogits from the last train forward."""
        cache = self._cache
        if not cache:
            raise RuntimeError("backward needs a preceding forward in train mode")
        g = np.asarray(grad_logits)
        if g.ndim == 4:
            g = g[None]
        grads = {}
        h = cache["cls"]
        grads["cls.b"] = g.sum(axis=(0, 2, 3, 4)).astype(self.dtype)
        g, grads["cls.w"] = tc.conv3d_backward(g, h, self.params["cls.w"])
        for j in (1, 0):
            h_in, z, mask = cache[f"fuse.{j}"]
            if mask is not None:
                g = tc.dropout_backward(g, mask, self.spec.dropout)
            g, grads[f"fuse.{j}.a"] = tc.prelu_backward(g, z, self.params[f"fuse.{j}.a"])
            grads[f"fuse.{j}.b"] = g.sum(axis=(0, 2, 3, 4)).astype(self.dtype)
            g, grads[f"fuse.{j}.w"] = tc.conv3d_backward(g, h_in, self.params[f"fuse.{j}.w"])
        if len(self.spec.active) == 2:
            parts = tc.split_channels(g, cache["concat_split"])
        else:
            parts = [g]
        for which, gp in zip(self.spec.active, parts):
            self._pathway_backward(which, gp, cache, grads)
        return {k: grads[k] for k in self.params}

    def _pathway_backward(self, which, g, cache, grads):
        path = self.spec.pathway(which)
        for i in reversed(range(len(path.widths))):
            h_in, bn_cache = cache[f"{which}.{i}"]
            xhat, _, gamma = bn_cache
            y = xhat * gamma.reshape(1, -1, 1, 1, 1) + self.params[f"{which}.{i}.beta"].reshape(1, -1, 1, 1, 1)
            g, grads[f"{which}.{i}.a"] = tc.prelu_backward(g, y, self.params[f"{which}.{i}.a"])
            g, grads[f"{which}.{i}.gamma"], grads[f"{which}.{i}.beta"] = tc.batchnorm_backward(g, bn_cache)
            g, grads[f"{which}.{i}.w"] = tc.conv3d_backward(
                g, h_in, self.params[f"{which}.{i}.w"], path.dilations[i], need_input_grad=i > 0)

    def clear_cache(self):
        self._cache = None

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                       {k: BatchNormStats(s.mean.copy(), s.var.copy(), s.count) for k, s in self.bn.items()})

    def predict_proba(self, local_patch=None, global_patch=None, mode="deterministic", rng=None):
        return tc.softmax_channels(self.forward(local_patch, global_patch, mode, rng))
