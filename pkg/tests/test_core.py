import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stylecode.core import (
    ConfigValidationError,
    DatasetManifest,
    ImageError,
    MalformedConfigError,
    ManifestError,
    TrainConfig,
    check_image,
    load_config,
    load_image,
    quantize,
    save_config,
    save_image,
)


def test_empty_config_takes_published_defaults(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.lr_initial == 5e-4
    assert cfg.lr_decay_factor == 0.2
    assert cfg.lr_decay_every == 30
    assert cfg.margin_content == 1.0
    assert cfg.margin_style == 5.0
    assert (cfg.lambda_s, cfg.lambda_c, cfg.lambda_tri, cfg.lambda_cycle) == (1.0, 1.0, 1.0, 0.01)


def test_negative_weight_rejected(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("lambda_cycle: -1\n")
    with pytest.raises(ConfigValidationError, match="lambda_cycle"):
        load_config(path)


def test_validation_lists_every_violation():
    with pytest.raises(ConfigValidationError) as info:
        TrainConfig(image_size=30, batch_size=1, lr_decay_factor=1.5)
    assert len(info.value.violations) == 3


@pytest.mark.parametrize("text,key", [
    ("lambda_s: abc\n", "lambda_s"),
    ("epochs: 2.5\n", "epochs"),
    ("bogus_key: 1\n", "bogus_key"),
    ("schema_version: 7\n", "schema_version"),
])
def test_malformed_config_names_key(tmp_path, text, key):
    path = tmp_path / "cfg.yaml"
    path.write_text(text)
    with pytest.raises(MalformedConfigError) as info:
        load_config(path)
    assert info.value.key == key


def test_yaml_syntax_error_is_malformed(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("lambda_s: [1,\n")
    with pytest.raises(MalformedConfigError):
        load_config(path)


def test_exponent_without_dot_parses_as_float(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("lr_initial: 5e-4\n")
    assert load_config(path).lr_initial == 5e-4


def test_config_round_trip_and_determinism(tmp_path):
    cfg = TrainConfig(image_size=64, seed=3, descriptor_weights_path="w.npz", dtype="float64")
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert load_config(path) == load_config(path)


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_constant_image_round_trip(tmp_path, value):
    img = torch.full((3, 32, 32), value)
    save_image(img, tmp_path / "x.png")
    assert torch.equal(load_image(tmp_path / "x.png"), img)


def test_random_image_round_trip_error(tmp_path):
    gen = torch.Generator().manual_seed(0)
    img = torch.rand(3, 32, 32, generator=gen, dtype=torch.float64)
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png", torch.float64)
    assert (back - img).abs().max() <= 1 / 255
    # The file holds exactly the quantized values.
    assert torch.allclose(back, quantize(img), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), size=st.sampled_from([8, 16, 32]))
def test_round_trip_idempotent_after_first_quantization(tmp_path_factory, seed, size):
    d = tmp_path_factory.mktemp("img")
    img = torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))
    save_image(img, d / "a.png")
    once = load_image(d / "a.png")
    save_image(once, d / "b.png")
    assert torch.equal(load_image(d / "b.png"), once)


@pytest.mark.parametrize("bad", [
    torch.zeros(3, 30, 30),
    torch.zeros(3, 32, 16),
    torch.zeros(1, 32, 32),
    torch.full((3, 32, 32), 1.5),
    torch.full((3, 32, 32), float("nan")),
])
def test_invalid_images_rejected(bad):
    with pytest.raises(ImageError):
        check_image(bad)


def test_undecodable_file(tmp_path):
    path = tmp_path / "junk.png"
    path.write_bytes(b"not a png")
    with pytest.raises(ImageError):
        load_image(path)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_image(torch.zeros(3, 8, 8), tmp_path / "missing_dir" / "x.png")


def test_manifest_requires_complete_grid():
    entries = {(0, None): "a", (0, 0): "b", (1, None): "c"}
    with pytest.raises(ManifestError, match="incomplete"):
        DatasetManifest((0, 1), (0,), entries, forge_seed=0, image_size=32)
    entries[(1, 0)] = "d"
    m = DatasetManifest((0, 1), (0,), entries, forge_seed=0, image_size=32)
    assert DatasetManifest.from_dict(m.to_dict()) == m
