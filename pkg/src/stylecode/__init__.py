"""Disentangled content/style codes for images: dual encoders, a shared decoder,
perceptual + triplet + cycle training, and analysis tools."""

from .core import DatasetManifest, TrainConfig, load_config, load_image, load_manifest, save_image

__all__ = ["DatasetManifest", "TrainConfig", "load_config", "load_image", "load_manifest",
           "save_image"]
