"""Synthetic content x style grid and the triplet sampler.

Content images are seeded compositions of ellipses, rectangles and linear
gradients. Styles are closed-form pixel transforms (color mixing, bias, gamma,
then a blend with a small convolution texture) drawn from a seed, which keeps
"same content" and "same style" exact by construction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    ORIGINAL,
    CellKey,
    DatasetManifest,
    PathLike,
    check_image,
    load_image,
    save_image,
    save_manifest,
)

# Texture family mixed per style. Entries are true-convolution kernels.
TEXTURE_FAMILY = {
    "identity": np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float64),
    "sharpen": np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.float64),
    "emboss": np.array([[-2, -1, 0], [-1, 1, 1], [0, 1, 2]], dtype=np.float64),
    "box_blur": np.full((3, 3), 1 / 9, dtype=np.float64),
}

DIAG_RANGE = (0.6, 1.2)
OFFDIAG_RANGE = (-0.15, 0.15)
BIAS_RANGE = (-0.2, 0.2)
GAMMA_LOG_RANGE = (np.log(0.5), np.log(2.0))
STRENGTH_RANGE = (0.3, 1.0)


class TooFewClassesError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StyleTransform:
    style_id: int
    color_matrix: np.ndarray
    color_bias: np.ndarray
    gamma: np.ndarray
    texture_kernel: np.ndarray
    texture_strength: float

    @classmethod
    def identity(cls, style_id: int = -1) -> "StyleTransform":
        return cls(style_id, np.eye(3), np.zeros(3), np.ones(3),
                   TEXTURE_FAMILY["identity"].copy(), 0.0)

    def params(self) -> Tuple:
        return (self.style_id, self.color_matrix.tolist(), self.color_bias.tolist(),
                self.gamma.tolist(), self.texture_kernel.tolist(), self.texture_strength)

    def __eq__(self, other):
        return isinstance(other, StyleTransform) and self.params() == other.params()

    def __hash__(self):
        return hash(repr(self.params()))


@dataclass(frozen=True)
class Triplet:
    anchor: CellKey
    positive: CellKey
    negative: CellKey

    def keys(self) -> Tuple[CellKey, CellKey, CellKey]:
        return (self.anchor, self.positive, self.negative)


# Roles differ only in the invariants they satisfy.
ContentTriplet = Triplet
StyleTriplet = Triplet


# --------------------------------------------------------------------------
# content images


def _gradient(size, rng):
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    c0, c1 = rng.uniform(0, 1, size=(2, 3))
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def _content_image(size: int, rng: np.random.Generator) -> np.ndarray:
    img = _gradient(size, rng)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(rng.integers(3, 7)):
        kind = rng.integers(3)
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size / 10, size / 3, 2)
        if kind == 0:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        if kind == 2:
            fill = _gradient(size, rng)
        else:
            fill = np.broadcast_to(rng.uniform(0, 1, 3)[:, None, None], img.shape)
        img = np.where(mask[None], fill, img)
    return np.clip(img, 0, 1)


def generate_content_images(count: int, size: int, seed: int,
                            dtype: torch.dtype = torch.float32) -> List[torch.Tensor]:
    """Return ``count`` pairwise-distinct procedural images, deterministic in ``seed``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size <= 0 or size % 8:
        raise ValueError(f"size must be a positive multiple of 8, got {size}")
    rng = np.random.default_rng(seed)
    out: List[np.ndarray] = []
    while len(out) < count:
        img = _content_image(size, rng)
        if all(np.any(img != prev) for prev in out):
            out.append(img)
    return [torch.from_numpy(a).to(dtype) for a in out]


def load_content_dir(directory: PathLike, size: int,
                     dtype: torch.dtype = torch.float32) -> List[torch.Tensor]:
    """Adapter for user-supplied photos: center crop to square, resize, sort by name."""
    from PIL import Image

    images = []
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}:
            continue
        with Image.open(p) as im:
            im = im.convert("RGB")
            side = min(im.size)
            left, top = (im.width - side) // 2, (im.height - side) // 2
            im = im.crop((left, top, left + side, top + side)).resize((size, size), Image.BICUBIC)
            arr = np.asarray(im, dtype=np.float64) / 255
        images.append(torch.from_numpy(arr).permute(2, 0, 1).to(dtype).contiguous())
    if not images:
        raise ValueError(f"no images found in {directory}")
    return images


# --------------------------------------------------------------------------
# styles


def build_style_bank(n_styles: int, forge_seed: int) -> List[StyleTransform]:
    if n_styles < 2:
        raise ValueError(f"n_styles must be >= 2, got {n_styles}")
    rng = np.random.default_rng([forge_seed, 0x5E7])
    names = list(TEXTURE_FAMILY)
    bank = []
    for style_id in range(n_styles):
        m = rng.uniform(*OFFDIAG_RANGE, size=(3, 3))
        np.fill_diagonal(m, rng.uniform(*DIAG_RANGE, size=3))
        bias = rng.uniform(*BIAS_RANGE, size=3)
        gamma = np.exp(rng.uniform(*GAMMA_LOG_RANGE, size=3))
        mix = rng.dirichlet(np.full(len(names), 0.5))
        kernel = sum(w * TEXTURE_FAMILY[n] for w, n in zip(mix, names))
        strength = float(rng.uniform(*STRENGTH_RANGE))
        bank.append(StyleTransform(style_id, m, bias, gamma, kernel, strength))
    return bank


def _convolve(g: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    k = kernel.shape[0]
    # conv2d is cross-correlation; flip for a true convolution.
    w = torch.as_tensor(np.ascontiguousarray(kernel[::-1, ::-1]), dtype=g.dtype)
    w = w.expand(3, 1, k, k)
    padded = F.pad(g[None], (k // 2,) * 4, mode="replicate")
    return F.conv2d(padded, w, groups=3)[0]


def apply_style(img: torch.Tensor, t: StyleTransform) -> torch.Tensor:
    """Stylize one image. Computed in float64, returned in the input dtype.

    The affine color result is clamped to [0, 1] before the gamma power so the
    power stays real; borders use replicate padding.
    """
    check_image(img)
    x = img.to(torch.float64)
    m = torch.as_tensor(t.color_matrix, dtype=torch.float64)
    b = torch.as_tensor(t.color_bias, dtype=torch.float64)
    gamma = torch.as_tensor(t.gamma, dtype=torch.float64)
    g = torch.einsum("ij,jhw->ihw", m, x) + b[:, None, None]
    g = g.clamp(0, 1) ** gamma[:, None, None]
    if t.texture_strength:
        g = (1 - t.texture_strength) * g + t.texture_strength * _convolve(g, t.texture_kernel)
    return g.clamp(0, 1).to(img.dtype)


# --------------------------------------------------------------------------
# dataset


def cell_path(content_id: int, style_id: Optional[int]) -> str:
    name = "original" if style_id is ORIGINAL else f"style_{style_id}"
    return f"content_{content_id}/{name}.png"


def forge_dataset(contents: Sequence[torch.Tensor], bank: Sequence[StyleTransform],
                  out_dir: PathLike, forge_seed: int = 0, workers: int = 1) -> DatasetManifest:
    """Write every stylized cell plus every original and the manifest."""
    if not contents or not bank:
        raise ValueError("contents and bank must be nonempty")
    out_dir = Path(out_dir)
    size = contents[0].shape[1]
    for img in contents:
        check_image(img, size)
    by_id = {t.style_id: t for t in bank}
    if len(by_id) != len(bank):
        raise ValueError("style ids in the bank must be unique")

    entries = {}
    for c in range(len(contents)):
        entries[(c, ORIGINAL)] = cell_path(c, ORIGINAL)
        for t in bank:
            entries[(c, t.style_id)] = cell_path(c, t.style_id)

    def write(key):
        c, s = key
        img = contents[c] if s is ORIGINAL else apply_style(contents[c], by_id[s])
        path = out_dir / entries[key]
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_image(img, path)
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc

    keys = list(entries)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(write, keys))
    else:
        for key in keys:
            write(key)

    manifest = DatasetManifest(
        content_ids=tuple(range(len(contents))),
        style_ids=tuple(t.style_id for t in bank),
        entries=entries,
        forge_seed=forge_seed,
        image_size=size,
        root=out_dir,
    )
    save_manifest(manifest, out_dir)
    return manifest


def forge(out_dir: PathLike, n_contents: int = 8, n_styles: int = 4, size: int = 32,
          content_seed: int = 0, forge_seed: int = 1, workers: int = 1) -> DatasetManifest:
    contents = generate_content_images(n_contents, size, content_seed)
    bank = build_style_bank(n_styles, forge_seed)
    return forge_dataset(contents, bank, out_dir, forge_seed=forge_seed, workers=workers)


# --------------------------------------------------------------------------
# sampling


def sample_triplet_pair(m: DatasetManifest,
                        rng: np.random.Generator) -> Tuple[ContentTriplet, StyleTriplet]:
    """Draw (content-1, content-2, style) and build both triplets from them.

    content triplet: (c1, s), (c1, original), (c2, s)
    style triplet:   (c1, s), (c2, s), (c1, original)
    """
    if len(m.content_ids) < 2 or len(m.style_ids) < 1:
        raise TooFewClassesError(
            f"need >= 2 contents and >= 1 style, got {len(m.content_ids)} and {len(m.style_ids)}")
    i, j = rng.choice(len(m.content_ids), size=2, replace=False)
    c1, c2 = m.content_ids[i], m.content_ids[j]
    s = m.style_ids[rng.integers(len(m.style_ids))]
    content = Triplet((c1, s), (c1, ORIGINAL), (c2, s))
    style = Triplet((c1, s), (c2, s), (c1, ORIGINAL))
    return content, style


class ImageStore:
    """Lazy, cached access to manifest images as tensors of one dtype."""

    def __init__(self, manifest: DatasetManifest, dtype: torch.dtype = torch.float32):
        self.manifest = manifest
        self.dtype = dtype
        self._cache = {}

    def __getitem__(self, key: CellKey) -> torch.Tensor:
        img = self._cache.get(key)
        if img is None:
            img = load_image(self.manifest.path(key), self.dtype)
            self._cache[key] = img
        return img

    def stack(self, keys: Sequence[CellKey]) -> torch.Tensor:
        return torch.stack([self[k] for k in keys])
