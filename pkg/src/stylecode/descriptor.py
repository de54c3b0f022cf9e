"""Frozen VGG16-prefix feature descriptor with named post-ReLU taps.

Only the layers through ``relu5_1`` exist. Weights are He-initialised from a
seed unless a weights file is given. A weights file is an ``.npz`` archive
holding ``<conv>.weight`` / ``<conv>.bias`` arrays plus a ``__meta__`` JSON
string with ``topology_hash`` and optional per-channel ``mean`` / ``std``
applied to the ``[0, 1]`` input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# (conv name, VGG16 output channels); "pool" marks a 2x2 max-pool.
VGG16_PREFIX: Tuple = (
    ("conv1_1", 64), ("conv1_2", 64), "pool",
    ("conv2_1", 128), ("conv2_2", 128), "pool",
    ("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256), "pool",
    ("conv4_1", 512), ("conv4_2", 512), ("conv4_3", 512), "pool",
    ("conv5_1", 512),
)

STYLE_TAPS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
CONTENT_TAPS = ("relu3_1", "relu4_1", "relu5_1")
KNOWN_TAPS = frozenset(STYLE_TAPS + CONTENT_TAPS)
MIN_INPUT_SIZE = 32


class UnknownTapError(KeyError):
    pass


class WeightsMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DescriptorSpec:
    topology: Tuple = VGG16_PREFIX
    tap_names: FrozenSet[str] = KNOWN_TAPS

    def __post_init__(self):
        unknown = set(self.tap_names) - KNOWN_TAPS
        if unknown:
            raise UnknownTapError(f"unknown taps {sorted(unknown)}")

    @classmethod
    def scaled(cls, width: float = 1.0) -> "DescriptorSpec":
        """VGG16 prefix with every channel count multiplied by ``width``."""
        topo = tuple(
            layer if layer == "pool" else (layer[0], max(1, int(round(layer[1] * width))))
            for layer in VGG16_PREFIX
        )
        return cls(topology=topo)

    def convs(self):
        return [layer for layer in self.topology if layer != "pool"]

    def topology_hash(self) -> str:
        return hashlib.sha256(json.dumps(list(self.topology)).encode()).hexdigest()[:16]

    def tap_shape(self, tap: str, size: int) -> Tuple[int, int, int]:
        """(C, H, W) of ``tap`` for a square input of side ``size``."""
        if tap not in KNOWN_TAPS:
            raise UnknownTapError(tap)
        target = "conv" + tap[len("relu"):]
        for layer in self.topology:
            if layer == "pool":
                size //= 2
            elif layer[0] == target:
                return (layer[1], size, size)
        raise UnknownTapError(f"{tap} not in topology")


class Descriptor(nn.Module):
    def __init__(self, spec: DescriptorSpec):
        super().__init__()
        self.spec = spec
        self.convs = nn.ModuleDict()
        in_ch = 3
        for name, out_ch in spec.convs():
            self.convs[name] = nn.Conv2d(in_ch, out_ch, 3, padding=1)
            in_ch = out_ch
        self.register_buffer("mean", torch.zeros(3))
        self.register_buffer("std", torch.ones(3))

    def freeze(self) -> "Descriptor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def forward(self, x: torch.Tensor, taps: Iterable[str]) -> Dict[str, torch.Tensor]:
        wanted = set(taps)
        unknown = wanted - KNOWN_TAPS
        if unknown:
            raise UnknownTapError(f"unknown taps {sorted(unknown)}")
        out = {}
        h = (x - self.mean[:, None, None]) / self.std[:, None, None]
        for layer in self.spec.topology:
            if len(out) == len(wanted):
                break
            if layer == "pool":
                h = F.max_pool2d(h, 2)
                continue
            h = F.relu(self.convs[layer[0]](h))
            tap = "relu" + layer[0][len("conv"):]
            if tap in wanted:
                out[tap] = h
        missing = wanted - set(out)
        if missing:
            raise UnknownTapError(f"taps {sorted(missing)} not produced by this topology")
        return out


def build_descriptor(spec: Optional[DescriptorSpec] = None, seed: int = 0,
                     weights_path: Optional[str] = None,
                     dtype: torch.dtype = torch.float32) -> Descriptor:
    """Build a frozen descriptor, He-initialised from ``seed`` or loaded from file."""
    spec = spec or DescriptorSpec()
    d = Descriptor(spec)
    if weights_path is None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in d.convs.values():
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
                conv.bias.zero_()
    else:
        load_descriptor_weights(d, weights_path)
    return d.to(dtype).freeze()


def load_descriptor_weights(d: Descriptor, path) -> None:
    with np.load(Path(path), allow_pickle=False) as archive:
        arrays = {k: archive[k] for k in archive.files}
    meta = json.loads(str(arrays.pop("__meta__"))) if "__meta__" in arrays else {}
    expected_hash = meta.get("topology_hash")
    state = {}
    for stage, (name, _) in enumerate(d.spec.convs(), start=1):
        conv = d.convs[name]
        for part in ("weight", "bias"):
            key = f"{name}.{part}"
            target = getattr(conv, part)
            if key not in arrays:
                raise WeightsMismatchError(f"stage {stage} ({name}): missing {key}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(target.shape):
                raise WeightsMismatchError(
                    f"stage {stage} ({name}): {part} shape {tuple(arr.shape)} "
                    f"does not match topology {tuple(target.shape)}")
            state[f"convs.{key}"] = torch.from_numpy(arr.astype(np.float32))
    if expected_hash is not None and expected_hash != d.spec.topology_hash():
        raise WeightsMismatchError(
            f"weights topology hash {expected_hash} != {d.spec.topology_hash()}")
    state["mean"] = torch.tensor(meta.get("mean", [0.0, 0.0, 0.0]), dtype=torch.float32)
    state["std"] = torch.tensor(meta.get("std", [1.0, 1.0, 1.0]), dtype=torch.float32)
    d.load_state_dict(state)


def save_descriptor_weights(d: Descriptor, path, mean: Sequence[float] = (0.0, 0.0, 0.0),
                            std: Sequence[float] = (1.0, 1.0, 1.0)) -> None:
    arrays = {}
    for name, conv in d.convs.items():
        arrays[f"{name}.weight"] = conv.weight.detach().cpu().numpy()
        arrays[f"{name}.bias"] = conv.bias.detach().cpu().numpy()
    meta = {"topology_hash": d.spec.topology_hash(), "mean": list(mean), "std": list(std)}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


# torchvision ``vgg16().features`` indices of the modelled convs.
_TORCHVISION_INDEX = {
    "conv1_1": 0, "conv1_2": 2, "conv2_1": 5, "conv2_2": 7, "conv3_1": 10,
    "conv3_2": 12, "conv3_3": 14, "conv4_1": 17, "conv4_2": 19, "conv4_3": 21,
    "conv5_1": 24,
}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def convert_torchvision_vgg16(state_dict: Dict[str, torch.Tensor], path) -> None:
    """Write a weights file from a torchvision ``vgg16`` state dict."""
    d = Descriptor(DescriptorSpec())
    with torch.no_grad():
        for name, idx in _TORCHVISION_INDEX.items():
            d.convs[name].weight.copy_(state_dict[f"features.{idx}.weight"])
            d.convs[name].bias.copy_(state_dict[f"features.{idx}.bias"])
    save_descriptor_weights(d, path, IMAGENET_MEAN, IMAGENET_STD)


def extract_taps(d: Descriptor, img: torch.Tensor, taps: Iterable[str]) -> Dict[str, torch.Tensor]:
    """Named activations for a ``(3, H, W)`` image or a ``(N, 3, H, W)`` batch.

    Gradients flow to ``img``; the descriptor's parameters are frozen.
    """
    single = img.dim() == 3
    x = img[None] if single else img
    if x.shape[-1] < MIN_INPUT_SIZE or x.shape[-2] < MIN_INPUT_SIZE:
        raise ValueError(f"descriptor input must be at least {MIN_INPUT_SIZE}px, got {tuple(x.shape[-2:])}")
    out = d(x, taps)
    if single:
        out = {k: v[0] for k, v in out.items()}
    return out
