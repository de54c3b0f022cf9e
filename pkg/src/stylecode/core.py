"""Shared types: training config, dataset manifest, and 8-bit image I/O.

Images are ``(3, H, W)`` torch tensors with values in ``[0, 1]``. Config and
manifest files are YAML with a top-level ``schema_version: 1``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import yaml
from PIL import Image

SCHEMA_VERSION = 1

# Style id of an unstylized original image.
ORIGINAL = None

PathLike = Union[str, Path]
CellKey = Tuple[int, Optional[int]]


class ConfigError(ValueError):
    pass


class MalformedConfigError(ConfigError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"malformed config key {key!r}: {message}")


class ConfigValidationError(ConfigError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config: " + "; ".join(self.violations))


class ImageError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters.

    Defaults for the loss weights, margins and learning-rate schedule are the
    published ones; shapes and batch size default to desk scale.
    """

    image_size: int = 32
    c_ch: int = 16
    s_ch: int = 8
    lambda_s: float = 1.0
    lambda_c: float = 1.0
    lambda_tri: float = 1.0
    lambda_cycle: float = 0.01
    margin_content: float = 1.0
    margin_style: float = 5.0
    lr_initial: float = 5e-4
    lr_decay_factor: float = 0.2
    lr_decay_every: int = 30
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    descriptor_weights_path: Optional[str] = None
    # Extensions beyond the published hyperparameters.
    triplets_per_batch: Optional[int] = None
    enc_width: int = 32
    descriptor_width: float = 1.0
    style_norm: bool = True
    code_skip: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigValidationError(problems)

    def violations(self) -> List[str]:
        out = []
        if self.image_size < 16 or self.image_size % 8:
            # Codes are image_size / 8 wide; instance norm needs at least 2x2.
            out.append(f"image_size must be a multiple of 8 and >= 16, got {self.image_size}")
        for name in ("c_ch", "s_ch", "lr_decay_every", "enc_width"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lambda_s", "lambda_c", "lambda_tri", "lambda_cycle",
                     "margin_content", "margin_style"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                out.append(f"{name} must be finite and >= 0, got {value}")
        if not (math.isfinite(self.lr_initial) and self.lr_initial > 0):
            out.append(f"lr_initial must be > 0, got {self.lr_initial}")
        if not 0 < self.lr_decay_factor < 1:
            out.append(f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}")
        if self.batch_size < 2:
            out.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            out.append(f"epochs must be >= 0, got {self.epochs}")
        if self.triplets_per_batch is not None and self.triplets_per_batch < 1:
            out.append(f"triplets_per_batch must be >= 1, got {self.triplets_per_batch}")
        if not self.descriptor_width > 0:
            out.append(f"descriptor_width must be > 0, got {self.descriptor_width}")
        if self.dtype not in ("float32", "float64"):
            out.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        return out

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def n_triplets(self) -> int:
        return self.triplets_per_batch or self.batch_size

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key == "schema_version":
                continue
            if key not in known:
                raise MalformedConfigError(key, "unknown key")
            kwargs[key] = _coerce(key, value, known[key].type)
        return cls(**kwargs)


def _coerce(key, value, type_name):
    optional = type_name.startswith("Optional")
    if value is None:
        if optional:
            return None
        raise MalformedConfigError(key, "null is not allowed")
    base = type_name[len("Optional["):-1] if optional else type_name
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise MalformedConfigError(key, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            # PyYAML reads "5e-4" (no dot) as a string.
            try:
                return float(value)
            except (TypeError, ValueError):
                raise MalformedConfigError(key, f"expected a number, got {value!r}") from None
        return float(value)
    if base == "bool":
        if not isinstance(value, bool):
            raise MalformedConfigError(key, f"expected true/false, got {value!r}")
        return value
    if base == "str":
        if not isinstance(value, str):
            raise MalformedConfigError(key, f"expected a string, got {value!r}")
        return value
    raise AssertionError(type_name)


def load_config(path: PathLike) -> TrainConfig:
    """Read a YAML config; absent keys fall back to the defaults."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "<document>"
        raise MalformedConfigError(where, str(exc)) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise MalformedConfigError("<document>", "top level must be a mapping")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise MalformedConfigError("schema_version", f"unsupported version {version!r}")
    return TrainConfig.from_dict(raw)


def save_config(cfg: TrainConfig, path: PathLike) -> None:
    data = {"schema_version": SCHEMA_VERSION, **cfg.to_dict()}
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


# --------------------------------------------------------------------------
# images


def check_image(img: torch.Tensor, size: Optional[int] = None) -> torch.Tensor:
    if not isinstance(img, torch.Tensor) or img.dim() != 3 or img.shape[0] != 3:
        shape = tuple(img.shape) if isinstance(img, torch.Tensor) else type(img).__name__
        raise ImageError(f"expected a (3, H, W) tensor, got {shape}")
    h, w = img.shape[1:]
    if h != w or h % 8:
        raise ImageError(f"image must be square with side a multiple of 8, got {h}x{w}")
    if size is not None and h != size:
        raise ImageError(f"expected a {size}x{size} image, got {h}x{w}")
    with torch.no_grad():
        if not torch.isfinite(img).all() or img.min() < 0 or img.max() > 1:
            raise ImageError("image values must be finite and within [0, 1]")
    return img


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Value mapping applied by the 8-bit round trip."""
    return torch.round(img * 255) / 255


def to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = torch.round(img.detach().to(torch.float64) * 255).clamp(0, 255)
    return arr.to(torch.uint8).permute(1, 2, 0).contiguous().numpy()


def save_image(img: torch.Tensor, path: PathLike) -> None:
    check_image(img)
    path = Path(path)
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def load_image(path: PathLike, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc
    img = torch.from_numpy(arr.copy()).permute(2, 0, 1).to(dtype) / 255
    return check_image(img)


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class DatasetManifest:
    """Index of the content x style grid.

    ``entries`` maps ``(content_id, style_id)`` to a path relative to ``root``;
    ``style_id`` is ``ORIGINAL`` (``None``) for the unstylized image.
    """

    content_ids: Tuple[int, ...]
    style_ids: Tuple[int, ...]
    entries: Dict[CellKey, str]
    forge_seed: int
    image_size: int
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        missing = [key for key in self.grid_keys() if key not in self.entries]
        if missing:
            raise ManifestError(f"incomplete grid, missing cells {missing[:5]}")
        extra = set(self.entries) - set(self.grid_keys())
        if extra:
            raise ManifestError(f"cells outside the grid: {sorted(extra, key=str)[:5]}")

    def grid_keys(self) -> List[CellKey]:
        keys = []
        for c in self.content_ids:
            keys.append((c, ORIGINAL))
            keys.extend((c, s) for s in self.style_ids)
        return keys

    def path(self, key: CellKey) -> Path:
        if self.root is None:
            raise ManifestError("manifest has no root directory")
        return self.root / self.entries[key]

    def validate_files(self) -> None:
        for key in self.grid_keys():
            p = self.path(key)
            if not p.exists():
                raise ManifestError(f"missing image file {p}")
            img = load_image(p)
            if img.shape[1] != self.image_size:
                raise ManifestError(f"{p} is {img.shape[1]}px, expected {self.image_size}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "forge_seed": self.forge_seed,
            "image_size": self.image_size,
            "content_ids": list(self.content_ids),
            "style_ids": list(self.style_ids),
            "entries": [
                {"content": c, "style": s, "path": self.entries[(c, s)]}
                for c, s in self.grid_keys()
            ],
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], root: Optional[Path] = None) -> "DatasetManifest":
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema {raw.get('schema_version')!r}")
        entries = {(e["content"], e["style"]): e["path"] for e in raw["entries"]}
        return cls(
            content_ids=tuple(raw["content_ids"]),
            style_ids=tuple(raw["style_ids"]),
            entries=entries,
            forge_seed=raw["forge_seed"],
            image_size=raw["image_size"],
            root=root,
        )


MANIFEST_NAME = "manifest.yaml"


def save_manifest(m: DatasetManifest, out_dir: PathLike) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(yaml.safe_dump(m.to_dict(), sort_keys=False))
    return path


def load_manifest(path: PathLike) -> DatasetManifest:
    """Load a manifest from its file or from the dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    raw = yaml.safe_load(path.read_text())
    return DatasetManifest.from_dict(raw, root=path.parent)
