"""Training loop, validation-based model selection, evaluation and ablation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .bayes import InferenceConfig, mc_segment, segment
from .config import RunConfig
from .io import Checkpoint, LabelMap, Volume, read_volume
from .metrics import MetricReport, report
from .network import Network
from .sampler import AugmentParams, BalancedSampler

log = logging.getLogger(__name__)

STREAMS = ("init", "sampler", "augment", "dropout")


@dataclass
class Dataset:
    train: list                          # [(Volume, LabelMap), ...]
    val: tuple | None = None
    test: tuple | None = None

    @property
    def num_classes(self):
        return self.train[0][1].num_classes

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Dataset":
        d = cfg.data
        train = [(read_volume(i), read_volume(l)) for i, l in zip(d.train_images, d.train_labels)]
        val = (read_volume(d.val_image), read_volume(d.val_labels)) if d.val_image else None
        test = (read_volume(d.test_image), read_volume(d.test_labels)) if d.test_image else None
        return cls(train, val, test)


@dataclass
class TrainResult:
    net: Network                 # best-by-validation parameters (final ones without validation)
    final: Network
    adam: tc.AdamState
    loss_log: list = field(default_factory=list)
    history: list = field(default_factory=list)
    checkpoint: Checkpoint | None = None

    def log_lines(self):
        lines = [f"iter={i + 1}\tloss={loss!r}" for i, loss in enumerate(self.loss_log)]
        lines += [f"iter={h['iteration']}\tval_mean_dsc={h['mean_dsc']!r}" for h in self.history]
        return lines


def _augment_params(t) -> AugmentParams:
    return AugmentParams(enabled=t.augment, max_rotation_deg=t.max_rotation_deg,
                         scale_range=tuple(t.scale_range), probability=t.augment_probability)


def validation_score(net: Network, image: Volume, labels: LabelMap, tile_extent) -> float:
    pred, _ = segment(net, image.data, tile_extent)
    rep = report(pred, labels.data, image.voxel_size, labels.num_classes)
    return rep.mean_dsc


def _rng_states(streams):
    return {k: g.bit_generator.state for k, g in streams.items()}


def _restore_streams(states):
    streams = {}
    for k, st in states.items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        streams[k] = g
    return streams


def make_checkpoint(cfg, final, adam, iteration, history, loss_log, streams, best) -> Checkpoint:
    return Checkpoint(
        config=cfg.to_dict(),
        params={k: v.copy() for k, v in final.params.items()},
        bn=final.copy().bn,
        adam=adam,
        iteration=iteration,
        history=list(history),
        loss_log=list(loss_log),
        rng_states=_rng_states(streams),
        best_params=None if best is None else best.params,
        best_bn=None if best is None else best.bn,
    )


def network_from_checkpoint(ckpt: Checkpoint, best=True) -> Network:
    cfg = RunConfig.from_dict(ckpt.config)
    spec = cfg.network.to_spec()
    if best and ckpt.best_params is not None:
        return Network(spec, ckpt.best_params, ckpt.best_bn)
    return Network(spec, ckpt.params, ckpt.bn)


def train(cfg: RunConfig, data: Dataset, resume: Checkpoint | None = None,
          stop_at: int | None = None, on_log=None) -> TrainResult:
    """Balanced sampling -> augmentation -> forward -> cross entropy ->
    backward -> Adam, with validation every ``validation_interval`` steps.

    ``stop_at`` ends the run early (for checkpoint/resume); ``on_log`` gets
    each log line as it is produced.
    """
    t = cfg.training
    spec = cfg.network.to_spec()
    if data.num_classes != spec.num_classes:
        raise ValueError(f"data has {data.num_classes} classes, network expects {spec.num_classes}")
    total = t.iterations(spec.num_classes)
    extents = spec.input_extents(t.output_extent)
    sampler = BalancedSampler(
        [v.data for v, _ in data.train], [l.data for _, l in data.train], spec.num_classes,
        global_extent=spec.global_.input_extent(t.output_extent),
        local_extent=spec.local.input_extent(t.output_extent),
        target_extent=t.output_extent,
        augment=_augment_params(t))

    if resume is None:
        streams = tc.make_streams(t.seed, STREAMS)
        net = Network.build(spec, streams["init"])
        adam = tc.AdamState(learning_rate=t.learning_rate)
        start, history, loss_log, best, best_score = 0, [], [], None, -math.inf
    else:
        streams = _restore_streams(resume.rng_states)
        net = Network(spec, resume.params, resume.bn).copy()
        adam = copy.deepcopy(resume.adam)
        start, history, loss_log = resume.iteration, list(resume.history), list(resume.loss_log)
        best = None
        best_score = -math.inf
        if resume.best_params is not None:
            best = Network(spec, resume.best_params, resume.best_bn).copy()
            best_score = max((h["mean_dsc"] for h in history), default=-math.inf)

    end = total if stop_at is None else min(stop_at, total)
    for it in range(start, end):
        batch = sampler.sample(t.batch_size, streams["sampler"], streams["augment"])
        logits = net.forward(batch.local_patches if "local" in extents else None,
                             batch.global_patches if "global" in extents else None,
                             "train", streams["dropout"])
        probs = tc.softmax_channels(logits)
        loss, grad = tc.cross_entropy(probs, batch.targets)
        if not math.isfinite(loss):
            raise tc.DivergenceError(f"non-finite loss at iteration {it + 1}")
        grads = net.backward(grad)
        net.clear_cache()
        net.params = tc.adam_step(net.params, grads, adam)
        loss_log.append(loss)
        if on_log:
            on_log(f"iter={it + 1}\tloss={loss!r}\tlr={t.learning_rate}")
        step = it + 1
        if data.val is not None and (step % t.validation_interval == 0 or step == total):
            score = validation_score(net, data.val[0], data.val[1], cfg.inference.tile_extent)
            history.append({"iteration": step, "mean_dsc": score})
            if on_log:
                on_log(f"iter={step}\tval_mean_dsc={score!r}")
            if score > best_score:
                best_score, best = score, net.copy()
    final = net
    ckpt = make_checkpoint(cfg, final, adam, end, history, loss_log, streams, best)
    chosen = best if best is not None else final
    return TrainResult(chosen, final, adam, loss_log, history, ckpt)


def evaluate(net: Network, image: Volume, labels: LabelMap, cfg: RunConfig,
             mc=True, seed=0) -> tuple[MetricReport, object]:
    """Segment ``image`` (MC-dropout mean by default) and score against ``labels``."""
    if mc:
        out = mc_segment(net, image.data, InferenceConfig(cfg.inference.mc_samples, net.spec.dropout,
                                                          seed, cfg.inference.tile_extent))
        pred = out.labels
    else:
        pred, out = segment(net, image.data, cfg.inference.tile_extent)
    return report(pred, labels.data, image.voxel_size, labels.num_classes), out


def ablate(cfg: RunConfig, data: Dataset, mc=True, on_log=None) -> dict:
    """Train and test the dual, local-only and global-only variants under one
    seed. Returns ``{pathways: MetricReport}``."""
    if data.test is None:
        raise ValueError("ablation needs a test volume")
    reports = {}
    for which in ("local", "global", "dual"):
        c = replace(cfg, network=replace(cfg.network, pathways=which))
        res = train(c, data, on_log=on_log)
        reports[which], _ = evaluate(res.net, data.test[0], data.test[1], c, mc=mc)
    return reports


def comparison_table(reports: dict) -> str:
    names = list(reports)
    first = reports[names[0]]
    head = "class\t" + "\t".join(f"{n}_dsc\t{n}_assd" for n in names)
    lines = [head]
    for i, row in enumerate(first.rows):
        cells = []
        for n in names:
            r = reports[n].rows[i]
            cells.append(f"{r.dsc:.4f}\t{r.assd:.4f}")
        lines.append(f"{row.class_id}\t" + "\t".join(cells))
    lines.append("mean\t" + "\t".join(f"{reports[n].mean_dsc:.4f}\t{reports[n].mean_assd:.4f}" for n in names))
    return "\n".join(lines) + "\n"
