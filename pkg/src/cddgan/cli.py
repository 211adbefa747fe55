"""Command line entry point: ``cddgan {synth,train,infer,eval,embed}``.

Exit status: 0 ok, 2 config error, 3 data error, 4 training divergence,
1 anything else. Log verbosity comes from ``CDDGAN_LOG_LEVEL`` (default
``WARNING``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import FILE_KEYS, parse_config, parse_overrides
from .errors import CDDError, DataError

log = logging.getLogger("cddgan")


def cmd_synth(args):
    from .imaging import make_synthetic_set

    manifest = make_synthetic_set(args.out, args.count, args.size, seed=args.seed)
    print(f"wrote {args.count} hazy/clean pairs and {manifest}")


def cmd_train(args):
    from .trainer import train

    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = parse_config(args.config, overrides, require_data=True)
    result = train(cfg, resume=args.resume)
    last = result.reports[-1] if result.reports else {}
    print(f"trained to step {result.trainer.step}; checkpoint {result.checkpoint_dir}; "
          f"final enc loss {last.get('enc', float('nan')):.6f}")


def cmd_infer(args):
    from .imaging import list_images, load_image, save_image
    from .trainer import load_checkpoint

    trainer = load_checkpoint(args.checkpoint)
    trainer.nets.eval()
    inputs = list_images(args.inp)
    if not inputs:
        raise DataError(f"no images in {args.inp}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        save_image(trainer.dehaze(load_image(path)), out / path.name)
    print(f"dehazed {len(inputs)} images into {out}")


def cmd_eval(args):
    from .evalkit import evaluate_dir

    out_csv = args.csv or Path(args.pred) / "metrics.csv"
    rows = evaluate_dir(args.pred, args.gt, out_csv)
    mean = rows[-1]
    print(f"{len(rows) - 1} images: mean PSNR {mean.psnr_db:.4f} dB, "
          f"mean SSIM {mean.ssim:.4f} ({out_csv})")


def cmd_embed(args):
    from .evalkit import export_embeddings
    from .imaging import list_images, load_image
    from .trainer import load_checkpoint

    trainer = load_checkpoint(args.checkpoint)
    trainer.nets.eval()
    hazy = [load_image(p) for p in list_images(args.hazy)[:args.count]]
    clean = [load_image(p) for p in list_images(args.clean)[:args.count]]
    if not hazy or not clean:
        raise DataError("embed needs at least one image per domain")
    dump, _, score = export_embeddings(trainer.nets, hazy, clean, args.out,
                                       num_patches=args.patches, method=args.method,
                                       seed=args.seed, dtype=trainer.dtype)
    print(f"exported {len(dump)} embeddings to {args.out}; silhouette {score:.4f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (train: overrides the config value; default 0)")

    parser = argparse.ArgumentParser(prog="cddgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic hazy/clean set")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", default="data/synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train from a config file",
                       epilog="config keys: " + ", ".join(FILE_KEYS))
    p.add_argument("--config", default=None, help="flat YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--resume", action="store_true",
                   help="continue from out_dir/checkpoints/latest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="dehaze a folder of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of predictions vs ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv", default=None, help="metrics CSV path (default PRED/metrics.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", parents=[common], help="export encoder embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hazy", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10, help="images per domain")
    p.add_argument("--patches", type=int, default=64, help="locations per tap")
    p.add_argument("--method", choices=("pca", "tsne"), default="pca")
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CDDGAN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command != "train":
        seed = 0 if args.seed is None else args.seed
        args.seed = seed
        np.random.seed(seed)
        torch.manual_seed(seed)
    try:
        args.func(args)
    except CDDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
