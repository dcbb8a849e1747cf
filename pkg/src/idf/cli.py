"""Command-line front end: ``idf {train,compress,decompress,eval,sample,progressive}``.

Exit codes: 0 ok, 2 usage, 3 data error, 4 corrupt container or model/hash mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import codec
from .data import DataError, ToyTexture, ingest, patch_batch, read_pnm, write_pnm
from .model import IDFModel, ModelFileError
from .rans import CorruptStream
from .train import TrainConfig, evaluate, train

log = logging.getLogger("idf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CORRUPT = 0, 2, 3, 4

# keys accepted in a JSON config file besides the TrainConfig fields
RUN_DEFAULTS = {
    "data": "toy",          # "toy" or a PGM/PPM path or glob
    "toy_images": 5000,     # training images drawn from the toy source
    "val_images": 500,      # held-out images (toy) or patches (files)
    "patches_per_epoch": 5000,
    "precision": codec.DEFAULT_PRECISION,
}


class UsageError(Exception):
    pass


def default_config():
    cfg = dataclasses.asdict(TrainConfig())
    cfg.update(RUN_DEFAULTS)
    return cfg


def load_config(path=None, overrides=None):
    cfg = default_config()
    if path:
        with open(path) as f:
            user = json.load(f)
        unknown = set(user) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    split_config(cfg)  # validate
    return cfg


def split_config(cfg):
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    try:
        tc = TrainConfig(**{k: v for k, v in cfg.items() if k in names})
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from e
    return tc, {k: v for k, v in cfg.items() if k not in names}


def load_dataset(cfg, tc, rng):
    """(train, val) integer arrays of shape (N, C, P, P)."""
    p = tc.patch_size
    if cfg["data"] == "toy":
        toy = ToyTexture(channels=tc.channels, size=p)
        return toy.sample(cfg["toy_images"], rng), toy.sample(cfg["val_images"], rng)
    records = ingest(cfg["data"])
    chans = {r.pixels.shape[0] for r in records}
    if chans != {tc.channels}:
        raise DataError(f"dataset has {sorted(chans)} channels, config expects {tc.channels}")
    n_val = min(cfg["val_images"], max(1, len(records) // 10)) if len(records) > 1 else 0
    train_recs, val_recs = records[n_val:] or records, records[:n_val]
    xtr = patch_batch(train_recs, p, cfg["patches_per_epoch"], rng)
    xva = patch_batch(val_recs, p, cfg["val_images"], rng) if val_recs else xtr[:0]
    return xtr, xva


def _emit(record, stream=None):
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


def _read_images(pattern):
    return ingest(pattern)


# -- verbs ----------------------------------------------------------------------

def cmd_train(args):
    cfg = load_config(args.config, {"epochs": args.epochs, "seed": args.seed, "data": args.data})
    if args.dump_config:
        _emit(cfg)
        return EXIT_OK
    if not args.out:
        raise UsageError("train needs --out")
    tc, _ = split_config(cfg)
    rng = np.random.default_rng(tc.seed)
    xtr, xva = load_dataset(cfg, tc, rng)
    metrics = open(args.metrics, "w") if args.metrics else None
    t0 = time.time()

    def on_epoch(rec):
        rec = dict(rec, seconds=round(time.time() - t0, 3))
        _emit(rec, metrics)
        if metrics is None:
            return
        log.info("epoch %d train %.4f val %s", rec["epoch"], rec["train_bpd"], rec["val_bpd"])

    try:
        model, _ = train(tc, xtr, xva, callback=on_epoch)
    finally:
        if metrics:
            metrics.close()
    digest = model.save(args.out)
    with open(args.out + ".config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
    log.info("saved %s (hash %s)", args.out, digest.hex())
    return EXIT_OK


def cmd_compress(args):
    model = IDFModel.load(args.model)
    records = _read_images(args.input)
    imgs, stats = codec.compress_batch([r.pixels for r in records], model, args.parallelism,
                                       args.precision)
    if len(records) == 1 and not os.path.isdir(args.output):
        outs = [args.output]
    else:
        os.makedirs(args.output, exist_ok=True)
        outs = [os.path.join(args.output, os.path.basename(r.source) + ".idfc") for r in records]
    for img, path in zip(imgs, outs):
        with open(path, "wb") as f:
            f.write(img.to_bytes())
    _emit(dict(stats.record(), command="compress"))
    return EXIT_OK


def cmd_decompress(args):
    model = IDFModel.load(args.model)
    with open(args.input, "rb") as f:
        data = f.read()
    x = codec.decompress(data, model)
    write_pnm(args.output, x)
    _emit({"command": "decompress", "shape": list(x.shape), "bytes": len(data),
           "bpd": 8 * len(data) / x.size, "rate": x.size / len(data)})
    return EXIT_OK


def _eval_arrays(model, x, precision, parallelism):
    analytic = evaluate(model, x)
    _, stats = codec.compress_batch(list(x), model, parallelism, precision)
    rec = stats.record()
    rec.update(analytic_bpd=analytic, coded_bpd=stats.bpd, gap=stats.bpd - analytic,
               header_bits_per_dim=stats.header_bits / stats.dims)
    return rec


def cmd_eval(args):
    if args.sweep:
        return _depth_sweep(args)
    if not args.model:
        raise UsageError("eval needs --model (or --sweep)")
    model = IDFModel.load(args.model)
    if args.data == "toy" or args.data is None:
        c, h, _ = model.config.in_shape
        x = ToyTexture(channels=c, size=h).sample(args.n, np.random.default_rng(args.seed))
    else:
        x = np.stack([r.pixels for r in _read_images(args.data)])
    _emit(dict(_eval_arrays(model, x, args.precision, args.parallelism), command="eval"))
    return EXIT_OK


def _depth_sweep(args):
    """Train one model per flow depth and report test bpd, one row per depth."""
    depths = [int(d) for d in args.sweep.split(",")]
    if any(not 1 <= d <= 16 for d in depths):
        raise UsageError("sweep depths must lie in 1..16")
    cfg = load_config(args.config, {"epochs": args.epochs, "seed": args.seed, "data": args.data})
    rows = []
    for d in depths:
        tc, _ = split_config(dict(cfg, depth=d))
        rng = np.random.default_rng(tc.seed)
        xtr, xva = load_dataset(cfg, tc, rng)
        model, hist = train(tc, xtr)
        test = xva if len(xva) else xtr
        row = {"depth": d, "train_bpd": hist[-1]["train_bpd"] if hist else None,
               "test_bpd": evaluate(model, test)}
        rows.append(row)
        _emit(dict(row, command="eval-sweep"))
    if args.table:
        with open(args.table, "w") as f:
            f.write("depth\ttrain_bpd\ttest_bpd\n")
            for r in rows:
                f.write(f"{r['depth']}\t{r['train_bpd']}\t{r['test_bpd']:.4f}\n")
    return EXIT_OK


def cmd_sample(args):
    model = IDFModel.load(args.model)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    ext = ".pgm" if model.config.in_shape[0] == 1 else ".ppm"
    for i, x in enumerate(model.sample(args.n, rng)):
        write_pnm(os.path.join(args.out_dir, f"sample_{i:04d}{ext}"), x)
    _emit({"command": "sample", "n": args.n, "seed": args.seed})
    return EXIT_OK


def cmd_progressive(args):
    model = IDFModel.load(args.model)
    with open(args.input, "rb") as f:
        data = f.read()
    c = codec.CompressedImage.from_bytes(data)
    os.makedirs(args.out_dir, exist_ok=True)
    ext = ".pgm" if model.config.in_shape[0] == 1 else ".ppm"
    rows = []
    for frac in (float(v) for v in args.fractions.split(",")):
        if not 0 <= frac <= 1:
            raise UsageError("fractions must lie in [0, 1]")
        k = codec.levels_for_fraction(c, frac)
        x = codec.progressive_decode(data, model, k, np.random.default_rng(args.seed))
        write_pnm(os.path.join(args.out_dir, f"progressive_{frac:.2f}{ext}"), x)
        rows.append({"fraction": frac, "levels": k})
    _emit({"command": "progressive", "renders": rows, "levels_total": len(model.levels)})
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="idf", description="Integer discrete flow lossless codec")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON config file (see --dump-config for every key)")
    p.add_argument("--data", help='"toy" or a PGM/PPM path/glob (overrides config)')
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="model file to write")
    p.add_argument("--metrics", help="line-delimited JSON metrics log (default stdout)")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="compress PGM/PPM images")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="image path or glob")
    p.add_argument("--output", required=True, help="container path, or directory for many inputs")
    p.add_argument("--precision", type=int, default=codec.DEFAULT_PRECISION)
    p.add_argument("--parallelism", type=int, default=1)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decompress a container to PGM/PPM")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="analytic vs coded bpd, or a flow-depth sweep")
    p.add_argument("--model")
    p.add_argument("--data", default="toy")
    p.add_argument("--n", type=int, default=200, help="toy images to evaluate")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--precision", type=int, default=codec.DEFAULT_PRECISION)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--sweep", help="comma-separated depths, e.g. 1,2,3,4,5,6,7,8")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--table", help="write the sweep table (TSV) here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="ancestral samples")
    p.add_argument("--model", required=True)
    p.add_argument("-n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("progressive", help="render from stream prefixes")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--fractions", default="0.15,0.3,0.6,1.0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_progressive)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"idf: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (codec.CodecError, ModelFileError, CorruptStream) as e:
        print(f"idf: corrupt input: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except (DataError, OSError, ValueError, TypeError) as e:
        print(f"idf: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
