"""End-to-end desk-scale experiment.

Forges the 8x4 training grid and a held-out grid (new contents, same styles),
trains with configs/desk.yaml, and writes reconstruction / transfer /
interpolation figures, the style-code PCA, and a metrics summary.

    python scripts/run_desk.py --out runs/desk
"""

import argparse
import json
import time
from pathlib import Path

import torch

from stylecode.codec import build_codec
from stylecode.core import load_config
from stylecode.forge import ImageStore, forge
from stylecode.losses import cycle_loss
from stylecode.stylist import (
    ImageGrid,
    interpolate_grid,
    reconstruct,
    render_grid,
    transfer,
    transfer_color_proximity,
    triplet_accuracy,
)
from stylecode.trainer import train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--held-out-seed", type=int, default=20261015)
    ap.add_argument("--triplets", type=int, default=2000)
    args = ap.parse_args()

    out = Path(args.out)
    cfg = load_config(args.config)
    train_m = forge(out / "data", 8, 4, cfg.image_size, content_seed=0, forge_seed=1)
    held_m = forge(out / "held", 8, 4, cfg.image_size, content_seed=args.held_out_seed, forge_seed=1)

    t0 = time.perf_counter()
    ckpt = train(cfg, train_m, out / "run", deterministic=True,
                 on_epoch=lambda e, b: print(f"epoch {e:3d} total {b.total:.5g}", flush=True))
    secs = time.perf_counter() - t0
    model, untrained = ckpt.codec(), build_codec(cfg).eval()

    metrics = {"train_seconds": round(secs, 1),
               "first_epoch_total": ckpt.loss_history[0].total,
               "last_epoch_total": ckpt.loss_history[-1].total}
    for name, m in (("train_grid", train_m), ("held_out", held_m)):
        x = ImageStore(m).stack(m.grid_keys())
        with torch.no_grad():
            for tag, codec in (("trained", model), ("untrained", untrained)):
                metrics[f"{name}/{tag}/cycle"] = float(cycle_loss(x, codec(x), codec))
                metrics[f"{name}/{tag}/pixel_l1"] = float((codec(x) - x).abs().mean())
                for which in ("content", "style"):
                    metrics[f"{name}/{tag}/{which}_accuracy"] = triplet_accuracy(
                        codec, m, args.triplets, which, seed=7)
    metrics["held_out/transfer_color_proximity (stand-in)"] = transfer_color_proximity(model, held_m)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics, indent=2))

    store = ImageStore(held_m)
    originals = [store[(c, None)] for c in held_m.content_ids[:6]]
    styled = [store[(c, 0)] for c in held_m.content_ids[:6]]
    render_grid(ImageGrid([originals, [reconstruct(model, x) for x in originals],
                           styled, [reconstruct(model, x) for x in styled]]),
                out / "reconstruction.png")
    exemplars = [store[(held_m.content_ids[6], s)] for s in held_m.style_ids]
    render_grid(ImageGrid([[c] + [transfer(model, c, e) for e in exemplars] for c in originals[:4]]),
                out / "transfer.png")
    grid = interpolate_grid(model, originals[:3], exemplars[0], exemplars[-1])
    render_grid(grid, out / "interpolation.png")

    from stylecode.cli import main as cli
    cli(["analyze", "--ckpt", str(sorted((out / "run").glob("ckpt_*.pt"))[-1]),
         "--data", str(out / "held"), "--out", str(out / "analysis")])


if __name__ == "__main__":
    main()
