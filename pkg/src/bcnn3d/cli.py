"""Command-line entry point: synth, train, predict, evaluate, slices.

Exit status is 0 on success, 1 on usage errors and 2 on data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import BCNNError, ConfigError
from .formats import (
    atomic_write,
    load_checkpoint,
    read_bvol,
    save_checkpoint,
    slice_to_pgm,
    write_bvol,
)
from .inference import InferenceConfig, predict
from .metrics import PatchConfig, evaluate, reports_to_csv
from .model import ArchConfig, build
from .synth import SynthSpec, synth_dataset
from .training import TrainConfig, train
from .volume import normalize

log = logging.getLogger("bcnn3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


def _load_json(path) -> tuple[dict, str]:
    text = Path(path).read_text()
    try:
        return json.loads(text), text
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def _construct(cls, fields: dict):
    try:
        return cls(**fields)
    except TypeError as e:
        raise ConfigError(f"bad {cls.__name__} fields: {e}") from e


def cmd_synth(args) -> int:
    cfg, text = _load_json(args.spec)
    log.info("synth config:\n%s", text)
    count = int(cfg.pop("count", args.count))
    spec = _construct(SynthSpec, cfg)
    out = Path(args.out)
    for i, (scan, label) in enumerate(synth_dataset(spec, count)):
        write_bvol(scan, out / f"scan_{i:03d}.bvol")
        write_bvol(label, out / f"label_{i:03d}.bvol")
    log.info("wrote %d pairs to %s", count, out)
    return EXIT_OK


def load_pairs(data_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    data_dir = Path(data_dir)
    scans = sorted(data_dir.glob("scan_*.bvol"))
    pairs = []
    for s in scans:
        label = data_dir / s.name.replace("scan_", "label_", 1)
        if not label.exists():
            raise BCNNError(f"no label file for {s.name}")
        pairs.append((read_bvol(s), read_bvol(label)))
    return pairs


def cmd_train(args) -> int:
    cfg, text = _load_json(args.config)
    log.info("train config:\n%s", text)
    unknown = set(cfg) - {"arch", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    arch = _construct(ArchConfig, cfg.get("arch", {}))
    tcfg = _construct(TrainConfig, cfg.get("train", {}))
    if args.seed is not None:
        tcfg.seed = args.seed
    data = load_pairs(args.data)
    model = build(arch, np.random.default_rng(tcfg.seed))
    out = Path(args.out)
    meta = {"config_text": text}

    def checkpoint(epoch, m, report):
        save_checkpoint(m, out.with_name(f"{out.stem}.epoch{epoch}{out.suffix}"), {**meta, "epoch": epoch})

    model, report = train(model, data, tcfg, on_epoch_end=checkpoint)
    save_checkpoint(model, out, {**meta, "epoch": tcfg.epochs})
    rows = ["epoch,batch,nll,kl,k_E,loss,seconds"]
    rows += [
        f"{r.epoch},{r.batch},{r.nll!r},{r.kl!r},{r.k_e!r},{r.loss!r},{r.seconds:.3f}" for r in report.rows
    ]
    atomic_write(out.with_suffix(".csv"), ("\n".join(rows) + "\n").encode())
    log.info("wrote checkpoint %s", out)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    volume = read_bvol(args.volume)
    if args.normalize:
        volume = normalize(volume)
    cfg = InferenceConfig(
        mc_samples=args.mc_samples,
        batch_size=args.batch_size,
        percentile_points=args.percentiles,
        trim_fraction=args.trim,
        step=args.step,
        chunk_size=args.chunk,
        stochastic=not args.deterministic,
        seed=args.seed,
    )
    bundle = predict(model, volume, cfg)
    out = Path(args.out)
    write_bvol(bundle.sigmoid, out / "sigmoid.bvol")
    write_bvol(bundle.pred, out / "pred.bvol")
    write_bvol(bundle.unc, out / "unc.bvol")
    for q, v in zip(bundle.percentile_points, bundle.percentiles):
        write_bvol(v, out / f"percentile_{q:g}.bvol")
    info = {
        "mc_samples": cfg.mc_samples,
        "batch_size": cfg.batch_size,
        "percentile_points": list(cfg.percentile_points),
        "trim_fraction": cfg.trim_fraction,
        "step": cfg.step,
        "seed": cfg.seed,
        "fallback_voxels": bundle.fallback_voxels,
        **bundle.meta,
    }
    atomic_write(out / "bundle.json", json.dumps(info, indent=2, sort_keys=True).encode())
    if args.pgm:
        mid = bundle.sigmoid.shape[0] // 2
        for name, v in (("sigmoid", bundle.sigmoid), ("pred", bundle.pred), ("unc", bundle.unc)):
            atomic_write(out / f"{name}_z{mid}.pgm", slice_to_pgm(v, "z", mid))
    log.info("wrote bundle to %s (%d chunks)", out, bundle.meta["n_chunks"])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    pred = read_bvol(pred_dir / "pred.bvol")
    unc = read_bvol(pred_dir / "unc.bvol")
    target = read_bvol(args.target)
    cfg = PatchConfig(
        accuracy_threshold=args.accuracy_threshold,
        uncertainty_threshold=args.uncertainty_threshold,
        stride=args.stride,
    )
    report = evaluate(pred, target, unc, cfg, sample=args.sample, method=args.method)
    out = Path(args.out)
    atomic_write(out, (report.to_json() + "\n").encode())
    atomic_write(out.with_suffix(".csv"), reports_to_csv([report]).encode())
    print(json.dumps({k: report.to_dict()[k] for k in ("accuracy", "uq_mean", "pavpu3d")}))
    return EXIT_OK


def cmd_slices(args) -> int:
    v = read_bvol(args.volume)
    atomic_write(args.out, slice_to_pgm(v, args.axis, args.index))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bcnn3d", description="3D Bayesian CNN segmentation with uncertainty maps")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scan/label BVOL pairs")
    s.add_argument("--spec", required=True, help="JSON file with SynthSpec fields (+ optional count)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a directory of scan/label pairs")
    t.add_argument("--config", required=True, help='JSON with "arch" and "train" sections')
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="Monte Carlo chunked prediction")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--volume", required=True)
    r.add_argument("--mc-samples", type=int, default=48)
    r.add_argument("--batch-size", type=int, default=8)
    r.add_argument("--step", type=int, default=3)
    r.add_argument("--percentiles", type=_floats, default=(33.0, 67.0))
    r.add_argument("--trim", type=float, default=0.1)
    r.add_argument("--chunk", type=_ints, help="chunk size d,h,w (default: whole volume)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--normalize", action="store_true", help="standardize the volume first")
    r.add_argument("--deterministic", action="store_true", help="use posterior means, no dropout")
    r.add_argument("--pgm", action="store_true", help="also write mid-depth PGM slices")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="accuracy and patch uncertainty metrics")
    e.add_argument("--pred", required=True, help="directory written by predict")
    e.add_argument("--target", required=True)
    e.add_argument("--out", required=True, help="report JSON path (a CSV row is written alongside)")
    e.add_argument("--accuracy-threshold", type=float, default=7 / 8)
    e.add_argument("--uncertainty-threshold", type=float, default=None)
    e.add_argument("--stride", type=int, default=1)
    e.add_argument("--sample", default="")
    e.add_argument("--method", default="")
    e.set_defaults(func=cmd_evaluate)

    sl = sub.add_parser("slices", help="export one slice as an 8-bit PGM")
    sl.add_argument("--volume", required=True)
    sl.add_argument("--axis", choices=("z", "y", "x"), default="z")
    sl.add_argument("--index", type=int, required=True)
    sl.add_argument("--out", required=True)
    sl.set_defaults(func=cmd_slices)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (BCNNError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
