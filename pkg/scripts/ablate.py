"""Short training runs over config overrides, one JSON line of metrics each.

Used to pick the desk-scale settings. Pass overrides as JSON objects:

    python scripts/ablate.py --data runs/abl/data --held runs/abl/held \\
        '{"epochs": 40}' '{"epochs": 40, "code_skip": true, "lambda_s": 1e-5}'

Forge the two grids first, e.g. ``stylecode forge --out runs/abl/data`` and
``stylecode forge --out runs/abl/held --content-seed 999``.
"""

import argparse
import json
import tempfile
import time

import torch

from stylecode.codec import build_codec
from stylecode.core import TrainConfig, load_manifest
from stylecode.forge import ImageStore
from stylecode.losses import cycle_loss
from stylecode.stylist import transfer_color_proximity, triplet_accuracy
from stylecode.trainer import train


def evaluate(codec, manifest, n):
    x = ImageStore(manifest).stack(manifest.grid_keys())
    with torch.no_grad():
        rec = codec(x)
        return dict(cycle=round(float(cycle_loss(x, rec, codec)), 4),
                    l1=round(float((rec - x).abs().mean()), 4),
                    content=triplet_accuracy(codec, manifest, n, "content"),
                    style=triplet_accuracy(codec, manifest, n, "style"))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", required=True)
    ap.add_argument("--held", required=True)
    ap.add_argument("--triplets", type=int, default=1000)
    ap.add_argument("overrides", nargs="+")
    args = ap.parse_args()
    train_m, held_m = load_manifest(args.data), load_manifest(args.held)

    for spec in args.overrides:
        cfg = TrainConfig.from_dict(json.loads(spec))
        t0 = time.perf_counter()
        with tempfile.TemporaryDirectory() as tmp:
            ckpt = train(cfg, train_m, tmp, keep_last=1)
        codec, init = ckpt.codec(), build_codec(cfg).eval()
        row = dict(overrides=json.loads(spec), first=ckpt.loss_history[0].total if ckpt.loss_history else None,
                   last=ckpt.loss_history[-1].total if ckpt.loss_history else None,
                   train=evaluate(codec, train_m, args.triplets),
                   held=evaluate(codec, held_m, args.triplets),
                   held_untrained=evaluate(init, held_m, args.triplets),
                   proximity=transfer_color_proximity(codec, held_m, 100),
                   seconds=round(time.perf_counter() - t0))
        print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
