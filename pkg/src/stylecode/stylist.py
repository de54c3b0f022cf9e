"""Inference and analysis on a trained codec: reconstruction, transfer,
interpolation grids, style-code PCA, and disentanglement metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from .codec import Codec, interpolate_style
from .core import ORIGINAL, DatasetManifest, PathLike, check_image, to_uint8
from .forge import ImageStore, sample_triplet_pair
from .trainer import Checkpoint

DEFAULT_ALPHAS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
SEPARATOR = 2

Model = Union[Checkpoint, Codec]


class DegenerateInputError(ValueError):
    pass


def as_codec(model: Model) -> Codec:
    return model.codec() if isinstance(model, Checkpoint) else model.eval()


def _prep(codec: Codec, img: torch.Tensor) -> torch.Tensor:
    check_image(img, codec.image_size)
    dtype = next(codec.parameters()).dtype
    return img.to(dtype)[None]


@torch.no_grad()
def reconstruct(model: Model, img: torch.Tensor) -> torch.Tensor:
    codec = as_codec(model)
    x = _prep(codec, img)
    return codec.decode(codec.encode_content(x), codec.encode_style(x))[0]


@torch.no_grad()
def transfer(model: Model, content_img: torch.Tensor, style_img: torch.Tensor) -> torch.Tensor:
    """Decode the content code of ``content_img`` with the style code of ``style_img``."""
    codec = as_codec(model)
    c = codec.encode_content(_prep(codec, content_img))
    s = codec.encode_style(_prep(codec, style_img))
    return codec.decode(c, s)[0]


@dataclass
class ImageGrid:
    cells: List[List[torch.Tensor]]
    row_labels: Optional[List[str]] = None
    col_labels: Optional[List[str]] = None

    def __post_init__(self):
        if not self.cells or not self.cells[0]:
            raise ValueError("grid must have at least one cell")
        shape = self.cells[0][0].shape
        ncols = len(self.cells[0])
        for row in self.cells:
            if len(row) != ncols:
                raise ValueError("ragged grid")
            for img in row:
                if img.shape != shape:
                    raise ValueError(f"cell shapes differ: {tuple(img.shape)} vs {tuple(shape)}")

    @property
    def shape(self):
        return len(self.cells), len(self.cells[0])


@torch.no_grad()
def interpolate_grid(model: Model, content_img, style_a_img: torch.Tensor,
                     style_b_img: torch.Tensor,
                     alphas: Sequence[float] = DEFAULT_ALPHAS) -> ImageGrid:
    """Rows are content images, columns are style mixing weights toward ``style_b_img``."""
    if not alphas:
        raise ValueError("alphas must be nonempty")
    for a in alphas:
        if not 0 <= a <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {a}")
    codec = as_codec(model)
    contents = [content_img] if torch.is_tensor(content_img) else list(content_img)
    sa = codec.encode_style(_prep(codec, style_a_img))
    sb = codec.encode_style(_prep(codec, style_b_img))
    rows = []
    for img in contents:
        c = codec.encode_content(_prep(codec, img))
        # One decode per cell keeps each cell bit-identical to a plain transfer.
        rows.append([codec.decode(c, interpolate_style(sa, sb, a))[0] for a in alphas])
    return ImageGrid(rows, col_labels=[f"{a:g}" for a in alphas])


def render_grid(grid: ImageGrid, path: PathLike) -> None:
    """Write the grid as one PNG with 2-pixel white separators.

    Labels, when present, go in an extra band above / left of the cells.
    """
    nrows, ncols = grid.shape
    _, h, w = grid.cells[0][0].shape
    top = 12 if grid.col_labels else 0
    left = 40 if grid.row_labels else 0
    height = top + nrows * h + (nrows - 1) * SEPARATOR
    width = left + ncols * w + (ncols - 1) * SEPARATOR
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    for i, row in enumerate(grid.cells):
        for j, img in enumerate(row):
            y = top + i * (h + SEPARATOR)
            x = left + j * (w + SEPARATOR)
            canvas[y:y + h, x:x + w] = to_uint8(img.clamp(0, 1))
    out = Image.fromarray(canvas, mode="RGB")
    if top or left:
        draw = ImageDraw.Draw(out)
        for j, label in enumerate(grid.col_labels or []):
            draw.text((left + j * (w + SEPARATOR), 0), label, fill=(0, 0, 0))
        for i, label in enumerate(grid.row_labels or []):
            draw.text((0, top + i * (h + SEPARATOR)), label, fill=(0, 0, 0))
    out.save(Path(path), format="PNG")


# --------------------------------------------------------------------------
# analysis


@dataclass
class Projection2D:
    points: np.ndarray          # (n, 2)
    labels: List[object]
    basis: np.ndarray           # (2, d), orthonormal rows
    explained_variance: np.ndarray  # (2,) fractions of total variance
    mean: np.ndarray

    def to_dict(self):
        return {
            "points": [{"x": float(x), "y": float(y), "label": lab}
                       for (x, y), lab in zip(self.points, self.labels)],
            "explained_variance": [float(v) for v in self.explained_variance],
        }


def sign_normalize(basis: np.ndarray) -> np.ndarray:
    """Flip each row so its first nonzero component is positive."""
    out = basis.copy()
    for row in out:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return out


def project_codes_2d(codes: Sequence, labels: Optional[Sequence] = None) -> Projection2D:
    """Project flattened codes onto the top two covariance eigenvectors."""
    x = np.stack([np.asarray(torch.as_tensor(c).detach().cpu(), dtype=np.float64).reshape(-1)
                  for c in codes])
    if x.shape[0] < 3:
        raise DegenerateInputError(f"need at least 3 codes, got {x.shape[0]}")
    if np.unique(x, axis=0).shape[0] < 2:
        raise DegenerateInputError("need at least 2 distinct codes")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0, None)
    basis = sign_normalize(eigvecs[:, order[:2]].T)
    if basis.shape[0] < 2:
        basis = np.vstack([basis, np.zeros_like(basis)])
    total = eigvals.sum()
    explained = eigvals[:2] / total if total > 0 else np.zeros(2)
    labels = list(labels) if labels is not None else [None] * x.shape[0]
    return Projection2D(centered @ basis.T, labels, basis, np.pad(explained, (0, 2 - explained.size)), mean)


@torch.no_grad()
def triplet_accuracy(model: Model, manifest: DatasetManifest, n_triplets: int,
                     which: str, seed: int = 12345, store: Optional[ImageStore] = None,
                     chunk: int = 250) -> float:
    """Fraction of sampled triplets with anchor-positive closer than anchor-negative."""
    if n_triplets < 1:
        raise ValueError(f"n_triplets must be >= 1, got {n_triplets}")
    if which not in ("content", "style"):
        raise ValueError(f"which must be 'content' or 'style', got {which!r}")
    codec = as_codec(model)
    dtype = next(codec.parameters()).dtype
    store = store or ImageStore(manifest, dtype)
    encode = codec.encode_content if which == "content" else codec.encode_style
    rng = np.random.default_rng(seed)
    triplets = [sample_triplet_pair(manifest, rng)[0 if which == "content" else 1]
                for _ in range(n_triplets)]
    # Encode each distinct image once.
    keys = sorted({k for t in triplets for k in t.keys()}, key=str)
    codes = {}
    for lo in range(0, len(keys), chunk):
        part = keys[lo:lo + chunk]
        for k, code in zip(part, encode(store.stack(part).to(dtype))):
            codes[k] = code.reshape(-1)
    hits = 0
    for t in triplets:
        a, p, n = (codes[k] for k in t.keys())
        hits += bool(((a - p) ** 2).sum() < ((a - n) ** 2).sum())
    return hits / n_triplets


@torch.no_grad()
def style_codes(model: Model, manifest: DatasetManifest, include_originals: bool = False):
    codec = as_codec(model)
    dtype = next(codec.parameters()).dtype
    store = ImageStore(manifest, dtype)
    keys = [k for k in manifest.grid_keys() if include_originals or k[1] is not ORIGINAL]
    codes = codec.encode_style(store.stack(keys))
    labels = ["original" if s is ORIGINAL else s for _, s in keys]
    return list(codes), labels


def channel_means(img: torch.Tensor) -> torch.Tensor:
    return img.reshape(3, -1).mean(dim=1)


@torch.no_grad()
def transfer_color_proximity(model: Model, manifest: DatasetManifest, n_pairs: int = 200,
                             seed: int = 0) -> float:
    """Stand-in transfer metric (no published counterpart).

    For random (content c under style s1, exemplar under style s2 != s1 with a
    different content), counts how often the channel means of transfer(c,
    exemplar) are nearer the exemplar's than the content image's own.
    """
    codec = as_codec(model)
    store = ImageStore(manifest, next(codec.parameters()).dtype)
    styles = list(manifest.style_ids) + [ORIGINAL]
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_pairs):
        c1, c2 = rng.choice(manifest.content_ids, 2, replace=False)
        i, j = rng.choice(len(styles), 2, replace=False)
        src, ex = store[(int(c1), styles[i])], store[(int(c2), styles[j])]
        out = channel_means(transfer(codec, src, ex))
        d_ex = torch.linalg.norm(out - channel_means(ex))
        d_src = torch.linalg.norm(out - channel_means(src))
        hits += bool(d_ex < d_src)
    return hits / n_pairs
