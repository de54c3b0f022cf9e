"""Perceptual reconstruction, triplet, and code-cycle losses plus their weighted sum.

Normalisations follow the method literally: the Gram term of a tap is divided
by ``C*H*W`` of that tap (not ``C**2``), and the cycle term divides code
distances by the *image* ``C*H*W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
from torch.func import functional_call

from .codec import Codec
from .core import TrainConfig
from .descriptor import CONTENT_TAPS, STYLE_TAPS, Descriptor, extract_taps


class LossShapeError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise LossShapeError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def _batch(x):
    return x[None] if x.dim() == 3 else x


def gram(f: torch.Tensor) -> torch.Tensor:
    """Channel inner products of a ``(C, H, W)`` map, or ``(N, C, H, W)`` batched."""
    flat = f.flatten(start_dim=-2)
    return flat @ flat.transpose(-1, -2)


def _sum_sq(x):
    return x.pow(2).flatten(start_dim=1).sum(dim=1)


def style_terms(taps_x: Dict[str, torch.Tensor], taps_rec: Dict[str, torch.Tensor]) -> torch.Tensor:
    """Per-sample style reconstruction loss from precomputed batched taps."""
    total = 0
    for name in STYLE_TAPS:
        fx, fr = taps_x[name], taps_rec[name]
        c, h, w = fx.shape[1:]
        total = total + _sum_sq(gram(fx) - gram(fr)) / (c * h * w)
    return total


def content_terms(taps_x: Dict[str, torch.Tensor], taps_rec: Dict[str, torch.Tensor]) -> torch.Tensor:
    total = 0
    for name in CONTENT_TAPS:
        fx, fr = taps_x[name], taps_rec[name]
        c, h, w = fx.shape[1:]
        total = total + _sum_sq(fx - fr) / (c * h * w)
    return total


def style_recon_loss(x: torch.Tensor, x_rec: torch.Tensor, d: Descriptor) -> torch.Tensor:
    """Gram-matrix distance over relu1_2, relu2_2, relu3_3, relu4_3 (batch mean)."""
    _same_shape(x, x_rec, "style_recon_loss")
    return style_terms(extract_taps(d, _batch(x), STYLE_TAPS),
                       extract_taps(d, _batch(x_rec), STYLE_TAPS)).mean()


def content_recon_loss(x: torch.Tensor, x_rec: torch.Tensor, d: Descriptor) -> torch.Tensor:
    """Feature distance over relu3_1, relu4_1, relu5_1 (batch mean)."""
    _same_shape(x, x_rec, "content_recon_loss")
    return content_terms(extract_taps(d, _batch(x), CONTENT_TAPS),
                         extract_taps(d, _batch(x_rec), CONTENT_TAPS)).mean()


def triplet_distances(a, p, n) -> Tuple[torch.Tensor, torch.Tensor]:
    """Squared L2 anchor-positive and anchor-negative distances per row of ``(N, ...)`` codes."""
    return _sum_sq(a - p), _sum_sq(a - n)


def batch_triplet_loss(a, p, n, margin: float) -> torch.Tensor:
    _same_shape(a, p, "triplet_loss")
    _same_shape(a, n, "triplet_loss")
    d_ap, d_an = triplet_distances(a, p, n)
    return torch.clamp(d_ap - d_an + margin, min=0).mean()


def triplet_loss(a, p, n, margin: float) -> torch.Tensor:
    """Hinge ``max(0, |a-p|^2 - |a-n|^2 + margin)`` on a single triplet of codes."""
    _same_shape(a, p, "triplet_loss")
    _same_shape(a, n, "triplet_loss")
    return batch_triplet_loss(a.reshape(1, -1), p.reshape(1, -1), n.reshape(1, -1), margin)


def cycle_terms(x_shape, codes_x, codes_rec) -> torch.Tensor:
    """Per-sample cycle loss given ``(content, style)`` codes of x and of its reconstruction."""
    chw = x_shape[-3] * x_shape[-2] * x_shape[-1]
    (cx, sx), (cr, sr) = codes_x, codes_rec
    return _sum_sq(cx - cr) / chw + _sum_sq(sx - sr) / chw


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor, p: Codec) -> torch.Tensor:
    _same_shape(x, x_rec, "cycle_loss")
    x, x_rec = _batch(x), _batch(x_rec)
    codes_x = (p.encode_content(x), p.encode_style(x))
    codes_rec = (p.encode_content(x_rec), p.encode_style(x_rec))
    return cycle_terms(x.shape, codes_x, codes_rec).mean()


# --------------------------------------------------------------------------
# full objective


@dataclass
class TripletBatch:
    """Images for ``T`` triplets of one kind, each tensor ``(T, 3, H, W)``."""

    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor


@dataclass
class Batch:
    images: torch.Tensor
    content: Optional[TripletBatch] = None
    style: Optional[TripletBatch] = None


@dataclass
class LossBreakdown:
    recon_style: float
    recon_content: float
    triplet_content: float
    triplet_style: float
    cycle: float
    total: float
    # Differentiable total; not serialised.
    value: Optional[torch.Tensor] = field(default=None, compare=False, repr=False)

    FIELDS = ("recon_style", "recon_content", "triplet_content", "triplet_style", "cycle", "total")

    def to_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in self.FIELDS}

    @classmethod
    def from_dict(cls, row: Dict[str, float]) -> "LossBreakdown":
        return cls(**{k: float(row[k]) for k in cls.FIELDS})

    def recompose(self, cfg: TrainConfig) -> float:
        return weighted_total(cfg, self.recon_style, self.recon_content,
                              self.triplet_content, self.triplet_style, self.cycle)


def weighted_total(cfg: TrainConfig, recon_style, recon_content, triplet_content,
                   triplet_style, cycle):
    return (cfg.lambda_s * recon_style + cfg.lambda_c * recon_content
            + cfg.lambda_tri * (triplet_content + triplet_style)
            + cfg.lambda_cycle * cycle)


def total_loss(batch: Batch, codec: Codec, descriptor: Descriptor, cfg: TrainConfig,
               x_rec: Optional[torch.Tensor] = None) -> LossBreakdown:
    """Weighted objective over one batch.

    Reconstruction and cycle terms average over ``batch.images``; each triplet
    term averages over its triplets, using ``margin_content`` under the content
    encoder and ``margin_style`` under the style encoder. Passing ``x_rec``
    replaces the decoder output.
    """
    x = batch.images
    if x.dim() != 4 or x.shape[0] == 0:
        raise EmptyBatchError("batch has no images")
    zero = x.new_zeros(())

    cx, sx = codec.encode_content(x), codec.encode_style(x)
    if x_rec is None:
        x_rec = codec.decode(cx, sx)
    _same_shape(x, x_rec, "total_loss")

    taps = STYLE_TAPS + CONTENT_TAPS
    with torch.no_grad():
        taps_x = extract_taps(descriptor, x, taps)
    taps_rec = extract_taps(descriptor, x_rec, taps)
    recon_s = style_terms(taps_x, taps_rec).mean()
    recon_c = content_terms(taps_x, taps_rec).mean()

    codes_rec = (codec.encode_content(x_rec), codec.encode_style(x_rec))
    cyc = cycle_terms(x.shape, (cx, sx), codes_rec).mean()

    tri_c = tri_s = zero
    if batch.content is not None:
        t = batch.content
        tri_c = batch_triplet_loss(codec.encode_content(t.anchor), codec.encode_content(t.positive),
                                   codec.encode_content(t.negative), cfg.margin_content)
    if batch.style is not None:
        t = batch.style
        tri_s = batch_triplet_loss(codec.encode_style(t.anchor), codec.encode_style(t.positive),
                                   codec.encode_style(t.negative), cfg.margin_style)

    value = weighted_total(cfg, recon_s, recon_c, tri_c, tri_s, cyc)
    parts = [float(v.detach()) for v in (recon_s, recon_c, tri_c, tri_s, cyc)]
    return LossBreakdown(*parts, total=weighted_total(cfg, *parts), value=value)


# --------------------------------------------------------------------------
# finite-difference gradient check


def check_gradient(scalar_function: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor,
                   epsilon: float = 1e-6, n_coords: Optional[int] = None,
                   seed: int = 0) -> float:
    """Max relative error between central differences and autograd at ``point``.

    Relative error per coordinate is ``|fd - an| / max(|fd|, |an|, 1e-8)``.
    ``n_coords`` samples that many coordinates without replacement (all if None).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    x = point.detach().clone().requires_grad_(True)
    out = scalar_function(x)
    if out.numel() != 1:
        raise ValueError(f"scalar_function must return a scalar, got shape {tuple(out.shape)}")
    (analytic,) = torch.autograd.grad(out.reshape(()), x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)

    total = x.numel()
    if n_coords is None or n_coords >= total:
        coords = np.arange(total)
    else:
        coords = np.random.default_rng(seed).choice(total, size=n_coords, replace=False)

    base = point.detach().clone().reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in coords:
            orig = base[i].item()
            base[i] = orig + epsilon
            f_plus = float(scalar_function(base.reshape(point.shape)))
            base[i] = orig - epsilon
            f_minus = float(scalar_function(base.reshape(point.shape)))
            base[i] = orig
            fd = (f_plus - f_minus) / (2 * epsilon)
            an = float(analytic[i])
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, err)
    return worst


class _Closure(torch.nn.Module):
    def __init__(self, inner, fn):
        super().__init__()
        self.inner = inner
        self.fn = fn

    def forward(self):
        return self.fn()


def flat_param_function(module: torch.nn.Module, loss_of_module: Callable[[], torch.Tensor]):
    """Expose a module's parameters as one flat vector.

    Returns ``(f, point)`` where ``f(vector)`` evaluates ``loss_of_module()``
    with ``module``'s parameters temporarily replaced by slices of ``vector``.
    """
    named = list(module.named_parameters())
    shapes = [p.shape for _, p in named]
    sizes = [p.numel() for _, p in named]
    point = torch.cat([p.detach().reshape(-1) for _, p in named])
    wrapper = _Closure(module, loss_of_module)

    def f(vector):
        chunks = torch.split(vector, sizes)
        params = {f"inner.{n}": v.reshape(s) for (n, _), v, s in zip(named, chunks, shapes)}
        return functional_call(wrapper, params, ())

    return f, point
