"""Command line: ``dualseg {phantom,train,infer,evaluate,ablate}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .bayes import InferenceConfig, mc_segment, uncertainty_summary
from .config import ConfigError, RunConfig
from .io import DataError, LabelMap, Volume, load_checkpoint, read_volume, save_checkpoint, write_volume
from .metrics import report
from .phantom import PhantomSpec, generate
from .tensor_core import DivergenceError
from .train import Dataset, ablate, comparison_table, network_from_checkpoint, train

log = logging.getLogger("dualseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _load_config(path, seed=None, resolve=True) -> RunConfig:
    """Load a config; data paths are taken relative to the config file when
    ``resolve`` is set (left as written otherwise, e.g. for checkpoint snapshots)."""
    cfg = RunConfig.load(path)
    if seed is not None:
        cfg.training = replace(cfg.training, seed=seed)
    if not resolve:
        return cfg
    base = Path(path).resolve().parent

    def rel(p):
        return None if p is None else str((base / p).resolve())

    d = cfg.data
    cfg.data = replace(d, train_images=[rel(p) for p in d.train_images],
                       train_labels=[rel(p) for p in d.train_labels],
                       val_image=rel(d.val_image), val_labels=rel(d.val_labels),
                       test_image=rel(d.test_image), test_labels=rel(d.test_labels))
    return cfg


def cmd_phantom(args):
    spec = PhantomSpec(dims=tuple(args.dims), num_classes=args.classes,
                       foreground_fraction=args.fraction, noise_sigma=args.noise,
                       anomaly=args.anomaly, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.set is None:
        image, labels = generate(spec)
        write_volume(f"{out}_image.vol", image)
        write_volume(f"{out}_labels.vol", labels)
        log.info("wrote %s_image.vol / %s_labels.vol (foreground %.4f%%)", out, out,
                 100 * (labels.data > 0).mean())
        return EXIT_OK
    n_train, n_val, n_test = args.set
    if n_train < 1 or n_val > 1 or n_test > 1:
        raise ValueError("--set needs at least one training volume and at most one val/test volume")
    roles = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    cfg = RunConfig()
    cfg.network.num_classes = args.classes
    files = []
    for i, role in enumerate(roles):
        image, labels = generate(replace(spec, seed=spec.seed + i))
        stem = f"{out.name}_{role}{i if role == 'train' else ''}"
        write_volume(out.parent / f"{stem}_image.vol", image)
        write_volume(out.parent / f"{stem}_labels.vol", labels)
        files.append((role, f"{stem}_image.vol", f"{stem}_labels.vol"))
    for role, img, lab in files:
        if role == "train":
            cfg.data.train_images.append(img)
            cfg.data.train_labels.append(lab)
        elif role == "val":
            cfg.data.val_image, cfg.data.val_labels = img, lab
        else:
            cfg.data.test_image, cfg.data.test_labels = img, lab
    cfg.save(out.parent / f"{out.name}_config.json")
    log.info("wrote %d phantoms and %s", len(files), out.parent / f"{out.name}_config.json")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config, args.seed, resolve=False)
    data = Dataset.from_config(_load_config(args.config, args.seed))
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log")
    with open(log_path, "w") as fh:
        res = train(cfg, data, resume=resume, stop_at=args.stop_at,
                    on_log=lambda line: fh.write(line + "\n"))
    save_checkpoint(args.out, res.checkpoint)
    log.info("saved %s after %d iterations", args.out, res.checkpoint.iteration)
    return EXIT_OK


def cmd_infer(args):
    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    cfg = RunConfig.from_dict(ckpt.config)
    image = read_volume(args.image)
    if not isinstance(image, Volume):
        raise DataError(f"{args.image} holds labels, not an image")
    icfg = InferenceConfig(mc_samples=args.samples or cfg.inference.mc_samples,
                           dropout=net.spec.dropout if args.dropout is None else args.dropout,
                           seed=args.seed if args.seed is not None else 0,
                           tile_extent=args.tile_extent or cfg.inference.tile_extent)
    timings = []
    t0 = time.perf_counter()
    out = mc_segment(net, image.data, icfg, timings)
    log.info("inference: %d passes in %.2fs (per pass: %s)", icfg.mc_samples,
             time.perf_counter() - t0, ", ".join(f"{t:.2f}" for t in timings))
    prefix = args.out
    for c in range(out.mean.shape[0]):
        write_volume(f"{prefix}_prob{c}.vol", Volume(out.mean[c], image.voxel_size))
    write_volume(f"{prefix}_labels.vol", LabelMap(out.labels, net.spec.num_classes, image.voxel_size))
    write_volume(f"{prefix}_variance.vol", Volume(out.variance, image.voxel_size))
    summary = uncertainty_summary(out)
    Path(f"{prefix}_uncertainty.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args):
    auto, manual = read_volume(args.auto), read_volume(args.manual)
    for name, v in (("auto", auto), ("manual", manual)):
        if not isinstance(v, LabelMap):
            raise DataError(f"{name} file is not a label map")
    if auto.dims != manual.dims:
        axes = [a for a, (p, q) in zip("xyz", zip(auto.dims, manual.dims)) if p != q]
        raise DataError(f"dimension mismatch along {','.join(axes)}: {auto.dims} vs {manual.dims}")
    if auto.num_classes != manual.num_classes:
        raise DataError(f"class count mismatch: {auto.num_classes} vs {manual.num_classes}")
    rep = report(auto.data, manual.data, manual.voxel_size, manual.num_classes)
    text = rep.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args.config, args.seed)
    data = Dataset.from_config(cfg)
    reports = ablate(cfg, data)
    text = comparison_table(reports)
    if args.out:
        Path(args.out).write_text(text)
        for name, rep in reports.items():
            Path(args.out).with_suffix(f".{name}.tsv").write_text(rep.to_text())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dualseg", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS threads")
    p.add_argument("--verify", action="store_true", help="single-threaded, reproducible mode")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="generate synthetic phantom volumes")
    ph.add_argument("out", help="output path prefix")
    ph.add_argument("--dims", type=int, nargs=3, default=[96, 96, 96])
    ph.add_argument("--classes", type=int, choices=(3, 9, 11), default=3)
    ph.add_argument("--fraction", type=float, default=0.005)
    ph.add_argument("--noise", type=float, default=0.02)
    ph.add_argument("--anomaly", action="store_true", help="add a lesion displacing the left structure")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--set", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                    help="write a train/val/test set and a matching config")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train a network")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--log", help="loss log path (default: checkpoint with .log)")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--stop-at", type=int, help="stop after this many iterations")
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="MC-dropout segmentation of a volume")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--image", required=True)
    inf.add_argument("--out", required=True, help="output path prefix")
    inf.add_argument("--samples", type=int)
    inf.add_argument("--dropout", type=float)
    inf.add_argument("--tile-extent", type=int)
    inf.add_argument("--seed", type=int)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("evaluate", help="DSC / ASSD report")
    ev.add_argument("auto")
    ev.add_argument("manual")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_evaluate)

    ab = sub.add_parser("ablate", help="dual vs single-pathway comparison")
    ab.add_argument("--config", required=True)
    ab.add_argument("--out")
    ab.add_argument("--seed", type=int)
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = 1 if args.verify else args.threads
    limits = threadpool_limits(threads) if threads else nullcontext()
    try:
        with limits:
            return args.func(args)
    except (ConfigError, ValueError) as e:
        if isinstance(e, DataError):
            log.error("%s", e)
            return EXIT_DATA
        log.error("%s", e)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
