"""Adam training loop with step-decayed learning rate and resumable checkpoints."""

from __future__ import annotations

import contextlib
import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .codec import Codec, build_codec
from .core import DatasetManifest, PathLike, TrainConfig
from .descriptor import Descriptor, DescriptorSpec, build_descriptor
from .forge import ImageStore, sample_triplet_pair
from .losses import Batch, LossBreakdown, TripletBatch, total_loss, weighted_total

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class UnsupportedSchemaError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    lr_initial: float = 5e-4
    decay_factor: float = 0.2
    decay_every: int = 30

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LrSchedule":
        return cls(cfg.lr_initial, cfg.lr_decay_factor, cfg.lr_decay_every)


def lr_at_epoch(s: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return s.lr_initial * s.decay_factor ** (epoch // s.decay_every)


@dataclass
class Checkpoint:
    epoch: int
    codec_state: Dict[str, torch.Tensor]
    optimizer_state: dict
    rng_state: dict
    config: TrainConfig
    loss_history: List[LossBreakdown] = field(default_factory=list)
    schema_version: int = CHECKPOINT_SCHEMA

    def codec(self) -> Codec:
        codec = build_codec(self.config)
        codec.load_state_dict(self.codec_state)
        return codec.eval()


def save_checkpoint(c: Checkpoint, path: PathLike) -> None:
    torch.save({
        "schema_version": c.schema_version,
        "epoch": c.epoch,
        "codec_state": c.codec_state,
        "optimizer_state": c.optimizer_state,
        "rng_state": c.rng_state,
        "config": c.config.to_dict(),
        "loss_history": [row.to_dict() for row in c.loss_history],
    }, Path(path))


def load_checkpoint(path: PathLike) -> Checkpoint:
    raw = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = raw.get("schema_version")
    if version != CHECKPOINT_SCHEMA:
        raise UnsupportedSchemaError(f"unsupported checkpoint schema {version!r} in {path}")
    return Checkpoint(
        epoch=raw["epoch"],
        codec_state=raw["codec_state"],
        optimizer_state=raw["optimizer_state"],
        rng_state=raw["rng_state"],
        config=TrainConfig.from_dict(raw["config"]),
        loss_history=[LossBreakdown.from_dict(row) for row in raw["loss_history"]],
        schema_version=version,
    )


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded, deterministic kernels for the duration of the block."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    was_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(was_det)


def make_descriptor(cfg: TrainConfig) -> Descriptor:
    return build_descriptor(DescriptorSpec.scaled(cfg.descriptor_width), seed=cfg.seed,
                            weights_path=cfg.descriptor_weights_path, dtype=cfg.torch_dtype)


def triplet_batches(manifest: DatasetManifest, store: ImageStore, rng: np.random.Generator,
                    n: int):
    """Sample ``n`` triplet pairs and stack them as (content, style) image batches."""
    pairs = [sample_triplet_pair(manifest, rng) for _ in range(n)]
    content = TripletBatch(*(store.stack([getattr(c, role) for c, _ in pairs])
                             for role in ("anchor", "positive", "negative")))
    style = TripletBatch(*(store.stack([getattr(s, role) for _, s in pairs])
                           for role in ("anchor", "positive", "negative")))
    return content, style


def _mean_breakdown(rows: List[LossBreakdown], cfg: TrainConfig) -> LossBreakdown:
    parts = [float(np.mean([getattr(r, k) for r in rows])) for k in LossBreakdown.FIELDS[:-1]]
    return LossBreakdown(*parts, total=weighted_total(cfg, *parts))


def _check_finite(b: LossBreakdown, epoch: int, step: int):
    for name in LossBreakdown.FIELDS:
        if not math.isfinite(getattr(b, name)):
            raise NonFiniteLossError(f"non-finite {name} loss at epoch {epoch}, step {step}")


def write_loss_history(history: List[LossBreakdown], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("epoch",) + LossBreakdown.FIELDS)
        writer.writeheader()
        for epoch, row in enumerate(history):
            writer.writerow({"epoch": epoch, **{k: repr(v) for k, v in row.to_dict().items()}})


def read_loss_history(path: PathLike) -> List[LossBreakdown]:
    with open(path, newline="") as fh:
        return [LossBreakdown.from_dict(row) for row in csv.DictReader(fh)]


def train(cfg: TrainConfig, manifest: DatasetManifest, out_dir: PathLike,
          deterministic: bool = True, resume: Optional[Checkpoint] = None,
          keep_last: Optional[int] = 3,
          on_epoch: Optional[Callable[[int, LossBreakdown], None]] = None) -> Checkpoint:
    """Train the codec on ``manifest``; returns the final checkpoint.

    An epoch is one pass over every manifest image (stylized and originals) in
    seeded shuffled order; each batch also draws ``cfg.n_triplets`` fresh
    triplet pairs. A checkpoint is written after every epoch; only the newest
    ``keep_last`` are kept on disk (all of them if None).
    """
    if manifest.image_size != cfg.image_size:
        raise ValueError(f"manifest images are {manifest.image_size}px, config expects {cfg.image_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with deterministic_mode(deterministic):
        codec = build_codec(cfg)
        descriptor = make_descriptor(cfg)
        optimizer = torch.optim.Adam(codec.parameters(), lr=cfg.lr_initial,
                                     betas=ADAM_BETAS, eps=ADAM_EPS)
        rng = np.random.default_rng(cfg.seed)
        history: List[LossBreakdown] = []
        start = 0
        if resume is not None:
            codec.load_state_dict(resume.codec_state)
            optimizer.load_state_dict(resume.optimizer_state)
            rng.bit_generator.state = resume.rng_state
            history = list(resume.loss_history)
            start = resume.epoch

        store = ImageStore(manifest, cfg.torch_dtype)
        keys = manifest.grid_keys()
        schedule = LrSchedule.from_config(cfg)

        def snapshot(epoch):
            return Checkpoint(epoch, {k: v.clone() for k, v in codec.state_dict().items()},
                              copy.deepcopy(optimizer.state_dict()), rng.bit_generator.state,
                              cfg, list(history))

        ckpt = snapshot(start)
        if start == 0 and cfg.epochs == 0:
            save_checkpoint(ckpt, out_dir / "ckpt_0.pt")
        written = []
        step = 0
        for epoch in range(start, cfg.epochs):
            lr = lr_at_epoch(schedule, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            codec.train()
            order = rng.permutation(len(keys))
            rows = []
            for lo in range(0, len(order), cfg.batch_size):
                batch_keys = [keys[i] for i in order[lo:lo + cfg.batch_size]]
                content, style = triplet_batches(manifest, store, rng, cfg.n_triplets)
                batch = Batch(store.stack(batch_keys), content, style)
                breakdown = total_loss(batch, codec, descriptor, cfg)
                _check_finite(breakdown, epoch, step)
                optimizer.zero_grad(set_to_none=True)
                breakdown.value.backward()
                optimizer.step()
                breakdown.value = None
                rows.append(breakdown)
                step += 1
            summary = _mean_breakdown(rows, cfg)
            history.append(summary)
            log.info("epoch %d lr %.2e %s", epoch, lr, summary.to_dict())
            if on_epoch is not None:
                on_epoch(epoch, summary)

            ckpt = snapshot(epoch + 1)
            path = out_dir / f"ckpt_{epoch + 1}.pt"
            save_checkpoint(ckpt, path)
            write_loss_history(history, out_dir / "loss_history.csv")
            written.append(path)
            if keep_last is not None:
                while len(written) > keep_last:
                    written.pop(0).unlink(missing_ok=True)
        codec.eval()
    return ckpt


def latest_checkpoint(out_dir: PathLike) -> Path:
    paths = sorted(Path(out_dir).glob("ckpt_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {out_dir}")
    return paths[-1]
