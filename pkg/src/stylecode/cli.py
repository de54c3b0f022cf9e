"""Command-line entry point: ``stylecode <command> ...``.

Commands: forge, train, reconstruct, transfer, interpolate, analyze.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import forge as forge_mod
from .core import TrainConfig, load_config, load_image, load_manifest, save_config, save_image
from .stylist import (
    DEFAULT_ALPHAS,
    interpolate_grid,
    project_codes_2d,
    reconstruct,
    render_grid,
    style_codes,
    transfer,
    transfer_color_proximity,
    triplet_accuracy,
)
from .trainer import latest_checkpoint, load_checkpoint, train

log = logging.getLogger("stylecode")


def _alphas(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad alpha list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("alpha list is empty")
    return values


def _load(ckpt, path):
    return load_image(path, ckpt.config.torch_dtype)


def cmd_forge(args):
    if args.content_dir:
        contents = forge_mod.load_content_dir(args.content_dir, args.size)
    else:
        contents = forge_mod.generate_content_images(args.contents, args.size, args.content_seed)
    bank = forge_mod.build_style_bank(args.styles, args.forge_seed)
    m = forge_mod.forge_dataset(contents, bank, args.out, forge_seed=args.forge_seed,
                                workers=args.workers)
    print(f"wrote {len(m.entries)} images to {args.out}")


def cmd_train(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    resume = None
    if args.resume:
        path = latest_checkpoint(out) if args.resume == "latest" else Path(args.resume)
        resume = load_checkpoint(path)
        log.info("resuming from %s (epoch %d)", path, resume.epoch)
    ckpt = train(cfg, manifest, out, deterministic=args.deterministic, resume=resume,
                 keep_last=args.keep_last or None,
                 on_epoch=lambda e, b: print(f"epoch {e:3d}  total {b.total:.6g}", flush=True))
    print(f"finished at epoch {ckpt.epoch}; checkpoints and loss_history.csv in {out}")


def cmd_reconstruct(args):
    ckpt = load_checkpoint(args.ckpt)
    save_image(reconstruct(ckpt, _load(ckpt, args.input)), args.out)


def cmd_transfer(args):
    ckpt = load_checkpoint(args.ckpt)
    save_image(transfer(ckpt, _load(ckpt, args.content), _load(ckpt, args.style)), args.out)


def cmd_interpolate(args):
    ckpt = load_checkpoint(args.ckpt)
    contents = [_load(ckpt, p) for p in args.content]
    grid = interpolate_grid(ckpt, contents, _load(ckpt, args.style_a), _load(ckpt, args.style_b),
                            args.alphas)
    render_grid(grid, args.out)


def cmd_analyze(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ckpt = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    codes, labels = style_codes(ckpt, manifest)
    proj = project_codes_2d(codes, labels)
    (out / "pca_style_codes.json").write_text(json.dumps(proj.to_dict(), indent=2))

    fig, ax = plt.subplots(figsize=(5, 5))
    for style in sorted(set(labels)):
        pts = proj.points[[i for i, lab in enumerate(labels) if lab == style]]
        ax.scatter(pts[:, 0], pts[:, 1], label=f"style {style}", s=18)
    ev = proj.explained_variance
    ax.set_xlabel(f"PC1 ({ev[0]:.0%})")
    ax.set_ylabel(f"PC2 ({ev[1]:.0%})")
    ax.set_title("Style codes")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "pca_style_codes.png", dpi=120)
    plt.close(fig)

    report = {
        "checkpoint": str(args.ckpt),
        "epoch": ckpt.epoch,
        "n_triplets": args.triplets,
        "triplet_accuracy": {
            which: triplet_accuracy(ckpt, manifest, args.triplets, which, seed=args.seed)
            for which in ("content", "style")
        },
        # No published counterpart; a stand-in measure of transfer behaviour.
        "transfer_color_proximity (stand-in metric)": transfer_color_proximity(
            ckpt, manifest, n_pairs=200, seed=args.seed),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stylecode", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="synthesize the content x style image grid")
    p.add_argument("--out", required=True)
    p.add_argument("--contents", type=int, default=8)
    p.add_argument("--styles", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--content-seed", type=int, default=0)
    p.add_argument("--forge-seed", type=int, default=1)
    p.add_argument("--content-dir", help="use images from this directory as contents")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_forge)

    p = sub.add_parser("train", help="train the codec on a forged dataset")
    p.add_argument("--config", help="YAML config; defaults are used when omitted")
    p.add_argument("--data", required=True, help="dataset directory or manifest file")
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, deterministic kernels")
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.add_argument("--resume", help="checkpoint path, or 'latest' to continue in --out")
    p.add_argument("--keep-last", type=int, default=3,
                   help="keep only the newest N checkpoints; 0 keeps all (default: 3)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="encode and decode one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("transfer", help="content of one image in the style of another")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("interpolate", help="grid of style-code interpolations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--content", required=True, nargs="+")
    p.add_argument("--style-a", required=True)
    p.add_argument("--style-b", required=True)
    p.add_argument("--alphas", type=_alphas, default=list(DEFAULT_ALPHAS))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("analyze", help="style-code PCA and triplet accuracy report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--triplets", type=int, default=2000)
    p.add_argument("--seed", type=int, default=12345)
    p.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
