import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

import oracles
from stylecode.codec import (
    CodecShapeError,
    build_codec,
    decode,
    encode_content,
    encode_style,
    interpolate_style,
    param_count,
)
from stylecode.core import TrainConfig

F64 = torch.float64


def rand(*shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, dtype=dtype, generator=torch.Generator().manual_seed(seed))


@pytest.fixture(scope="module")
def codec():
    return build_codec(TrainConfig())


def test_content_code_shape(codec):
    assert encode_content(codec, rand(3, 32, 32)).shape == (16, 4, 4)


def test_content_code_shape_published_size():
    codec = build_codec(TrainConfig(image_size=128, c_ch=64, s_ch=32, enc_width=4))
    x = rand(3, 128, 128)
    assert encode_content(codec, x).shape == (64, 16, 16)
    assert encode_style(codec, x).shape == (32, 16, 16)
    assert decode(codec, encode_content(codec, x), encode_style(codec, x)).shape == (3, 128, 128)


def test_style_code_shape(codec):
    assert encode_style(codec, rand(3, 32, 32)).shape == (8, 4, 4)


def test_encoders_pure(codec):
    x = rand(3, 32, 32, seed=4)
    assert torch.equal(encode_content(codec, x), encode_content(codec, x))
    assert torch.equal(encode_style(codec, x), encode_style(codec, x))


def test_style_encoder_shallower_than_content(codec):
    assert param_count(codec.style_encoder) < param_count(codec.content_encoder)


def test_zero_input_zero_style_code(codec):
    assert torch.count_nonzero(encode_style(codec, torch.zeros(3, 32, 32))) == 0


def test_decode_shape_range_determinism(codec):
    c = torch.randn(16, 4, 4, generator=torch.Generator().manual_seed(0))
    s = torch.randn(8, 4, 4, generator=torch.Generator().manual_seed(1))
    out = decode(codec, c, s)
    assert out.shape == (3, 32, 32)
    assert out.min() >= 0 and out.max() <= 1
    assert torch.equal(out, decode(codec, c, s))


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(1e-3, 1e4), seed=st.integers(0, 10**6))
def test_decoder_range_for_arbitrary_codes(codec, scale, seed):
    g = torch.Generator().manual_seed(seed)
    out = decode(codec, scale * torch.randn(16, 4, 4, generator=g),
                 scale * torch.randn(8, 4, 4, generator=g))
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_decode_shape_mismatch(codec):
    with pytest.raises(CodecShapeError):
        decode(codec, torch.zeros(16, 4, 4), torch.zeros(8, 2, 2))
    with pytest.raises(CodecShapeError):
        encode_content(codec, rand(3, 64, 64))


def test_decoder_instance_norm_statistics(codec):
    captured = []

    def hook(module, inp, out):
        # Undo the affine part to read the normalized activation.
        w, b = module.weight[None, :, None, None], module.bias[None, :, None, None]
        captured.append((out - b) / w)

    with torch.no_grad():
        handles = [m.register_forward_hook(hook) for m in codec.decoder.modules()
                   if isinstance(m, nn.InstanceNorm2d)]
        try:
            x = rand(2, 3, 32, 32, seed=3)
            codec.decode(codec.encode_content(x), codec.encode_style(x))
        finally:
            for h in handles:
                h.remove()
    assert len(captured) == 3
    for act in captured:
        a = act.to(F64)
        mean = a.mean(dim=(2, 3))
        var = a.var(dim=(2, 3), unbiased=False)
        assert mean.abs().max() < 1e-5
        assert (var - 1).abs().max() < 1e-2  # eps=1e-5 in the denominator


@pytest.mark.parametrize("code_skip,style_norm", [(False, True), (True, False)])
def test_numpy_oracle_agrees(code_skip, style_norm):
    codec = build_codec(TrainConfig(enc_width=4, dtype="float64", seed=7, code_skip=code_skip,
                                    style_norm=style_norm))
    state = oracles.numpy_state(codec)
    x = rand(3, 32, 32, seed=1, dtype=F64)
    c, s = encode_content(codec, x), encode_style(codec, x)
    assert np.abs(c.detach().numpy() - oracles.content_encode(state, x.numpy())).max() < 1e-10
    assert np.abs(s.detach().numpy() - oracles.style_encode(state, x.numpy())).max() < 1e-10
    out = decode(codec, c, s).detach().numpy()
    assert np.abs(out - oracles.decode(state, c.detach().numpy(), s.detach().numpy())).max() < 1e-10


@settings(max_examples=8, deadline=None)
@given(size=st.sampled_from([16, 24, 32, 48]), c_ch=st.integers(1, 6), s_ch=st.integers(1, 6),
       width=st.integers(1, 4))
def test_shape_laws(size, c_ch, s_ch, width):
    codec = build_codec(TrainConfig(image_size=size, c_ch=c_ch, s_ch=s_ch, enc_width=width))
    x = rand(2, 3, size, size)
    c, s = codec.encode_content(x), codec.encode_style(x)
    assert c.shape == (2, c_ch, size // 8, size // 8)
    assert s.shape == (2, s_ch, size // 8, size // 8)
    assert codec.decode(c, s).shape == x.shape


def test_interpolation_endpoints_and_midpoint():
    a, b = torch.randn(8, 4, 4), torch.randn(8, 4, 4)
    assert torch.equal(interpolate_style(a, b, 0.0), a)
    assert torch.equal(interpolate_style(a, b, 1.0), b)
    mid = interpolate_style(torch.full((2, 2), 2.0), torch.full((2, 2), 4.0), 0.5)
    assert torch.equal(mid, torch.full((2, 2), 3.0))


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0, 1), seed=st.integers(0, 10**6))
def test_interpolation_linearity(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(8, 4, 4, dtype=F64, generator=g), torch.randn(8, 4, 4, dtype=F64, generator=g)
    both = interpolate_style(a, b, alpha) + interpolate_style(b, a, alpha)
    assert (both - (a + b)).abs().max() <= 1e-12


def test_interpolation_errors():
    with pytest.raises(CodecShapeError):
        interpolate_style(torch.zeros(2), torch.zeros(3), 0.5)
    with pytest.raises(ValueError):
        interpolate_style(torch.zeros(2), torch.zeros(2), 1.5)


def test_same_seed_same_init():
    a, b = build_codec(TrainConfig(seed=3)), build_codec(TrainConfig(seed=3))
    for (_, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q)
