"""Content encoder, style encoder and shared decoder.

Both encoders reduce the spatial size by 8, so the two codes can be stacked
along channels and decoded back to an image of the original size.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import TrainConfig

LEAK = 0.2


class CodecShapeError(ValueError):
    pass


def _norm(ch):
    return nn.InstanceNorm2d(ch, affine=True)


def _conv(in_ch, out_ch, k=3, stride=1, normed=True):
    # A bias in front of an instance norm is cancelled by the mean subtraction.
    return nn.Conv2d(in_ch, out_ch, k, stride, k // 2, bias=not normed)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = _conv(in_ch, out_ch, 3, stride)
        self.norm1 = _norm(out_ch)
        self.conv2 = _conv(out_ch, out_ch)
        self.norm2 = _norm(out_ch)
        self.skip = None
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride)

    def forward(self, x):
        h = F.leaky_relu(self.norm1(self.conv1(x)), LEAK)
        h = self.norm2(self.conv2(h))
        s = x if self.skip is None else self.skip(x)
        return F.leaky_relu(h + s, LEAK)


class ContentEncoder(nn.Module):
    """Conv stem, then three stages of two residual blocks (stride 2 on entry)."""

    def __init__(self, c_ch, width=32):
        super().__init__()
        widths = [width, 2 * width, 4 * width]
        self.stem = nn.Sequential(_conv(3, width), _norm(width), nn.LeakyReLU(LEAK))
        blocks = []
        in_ch = width
        for w in widths:
            blocks += [ResBlock(in_ch, w, stride=2), ResBlock(w, w)]
            in_ch = w
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(in_ch, c_ch, 1)

    def forward(self, x):
        return self.head(self.blocks(self.stem(x)))


class StyleEncoder(nn.Module):
    """Four convs with strides 2, 2, 2, 1, each followed by norm and LeakyReLU."""

    def __init__(self, s_ch, width=32, norm=True):
        super().__init__()
        chans = [3, width, 2 * width, 2 * width, s_ch]
        layers = []
        for i, stride in enumerate((2, 2, 2, 1)):
            layers.append(_conv(chans[i], chans[i + 1], 3, stride, normed=norm))
            if norm:
                layers.append(_norm(chans[i + 1]))
            layers.append(nn.LeakyReLU(LEAK))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Three (nearest x2 upsample, conv, instance norm, LeakyReLU) stages, then conv + sigmoid.

    With ``code_skip`` the output conv also sees the codes upsampled x8, which
    lets per-image colour survive the instance norms.
    """

    def __init__(self, in_ch, width=32, code_skip=False):
        super().__init__()
        self.code_skip = code_skip
        skip_ch = in_ch if code_skip else 0
        widths = [4 * width, 2 * width, width]
        stages = []
        for w in widths:
            stages += [nn.Upsample(scale_factor=2, mode="nearest"),
                       _conv(in_ch, w), _norm(w), nn.LeakyReLU(LEAK)]
            in_ch = w
        self.stages = nn.Sequential(*stages)
        self.out = nn.Conv2d(in_ch + skip_ch, 3, 3, 1, 1)

    def forward(self, z):
        h = self.stages(z)
        if self.code_skip:
            h = torch.cat([h, F.interpolate(z, scale_factor=8, mode="nearest")], dim=1)
        return torch.sigmoid(self.out(h))


class Codec(nn.Module):
    def __init__(self, c_ch=16, s_ch=8, width=32, image_size=32, style_norm=True,
                 code_skip=False):
        super().__init__()
        self.c_ch, self.s_ch, self.image_size = c_ch, s_ch, image_size
        self.content_encoder = ContentEncoder(c_ch, width)
        self.style_encoder = StyleEncoder(s_ch, width, norm=style_norm)
        self.decoder = Decoder(c_ch + s_ch, width, code_skip)

    def _check_input(self, img):
        if img.dim() != 4 or img.shape[1] != 3 or tuple(img.shape[2:]) != (self.image_size,) * 2:
            raise CodecShapeError(
                f"expected (N, 3, {self.image_size}, {self.image_size}) images, got {tuple(img.shape)}")

    def encode_content(self, img):
        self._check_input(img)
        return self.content_encoder(img)

    def encode_style(self, img):
        self._check_input(img)
        return self.style_encoder(img)

    def decode(self, c, s):
        if c.shape[0] != s.shape[0] or c.shape[2:] != s.shape[2:]:
            raise CodecShapeError(f"code shapes disagree: {tuple(c.shape)} vs {tuple(s.shape)}")
        if c.shape[1] != self.c_ch or s.shape[1] != self.s_ch:
            raise CodecShapeError(
                f"expected {self.c_ch}+{self.s_ch} code channels, got {c.shape[1]}+{s.shape[1]}")
        return self.decoder(torch.cat([c, s], dim=1))

    def forward(self, img):
        return self.decode(self.encode_content(img), self.encode_style(img))


def init_codec(codec: Codec, seed: int) -> Codec:
    """He-normal conv weights and zero biases from ``seed``; norm affine at (1, 0)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in codec.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=LEAK, nonlinearity="leaky_relu", generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.InstanceNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
    return codec


def build_codec(cfg: TrainConfig) -> Codec:
    codec = Codec(cfg.c_ch, cfg.s_ch, cfg.enc_width, cfg.image_size, cfg.style_norm,
                  cfg.code_skip)
    return init_codec(codec, cfg.seed).to(cfg.torch_dtype)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# Single-image conveniences: (3, H, W) in, unbatched code or image out.

def _batched(fn, *xs):
    single = xs[0].dim() == 3
    out = fn(*(x[None] if single else x for x in xs))
    return out[0] if single else out


def encode_content(p: Codec, img: torch.Tensor) -> torch.Tensor:
    return _batched(p.encode_content, img)


def encode_style(p: Codec, img: torch.Tensor) -> torch.Tensor:
    return _batched(p.encode_style, img)


def decode(p: Codec, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    return _batched(p.decode, c, s)


def interpolate_style(a: torch.Tensor, b: torch.Tensor, alpha: float) -> torch.Tensor:
    """Convex combination ``(1 - alpha) * a + alpha * b``; exact at both endpoints."""
    if a.shape != b.shape:
        raise CodecShapeError(f"style code shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0:
        return a.clone()
    if alpha == 1:
        return b.clone()
    return (1 - alpha) * a + alpha * b
