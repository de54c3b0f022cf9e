import math

import pytest
import torch
from hypothesis import given, strategies as st

from stylecode.core import TrainConfig
from stylecode.forge import build_style_bank, forge_dataset, generate_content_images
from stylecode.losses import LossBreakdown
from stylecode.trainer import (
    Checkpoint,
    LrSchedule,
    NonFiniteLossError,
    UnsupportedSchemaError,
    latest_checkpoint,
    load_checkpoint,
    lr_at_epoch,
    make_descriptor,
    read_loss_history,
    save_checkpoint,
    train,
)

TINY = TrainConfig(enc_width=4, descriptor_width=0.125, batch_size=8, triplets_per_batch=4,
                   epochs=2, c_ch=4, s_ch=2, seed=5)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    return forge_dataset(generate_content_images(3, 32, 0), build_style_bank(2, 1), root)


@pytest.fixture(scope="module")
def run(manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, train(TINY.replace(epochs=3), manifest, out, keep_last=None)


@pytest.mark.parametrize("epoch,lr", [(0, 5e-4), (29, 5e-4), (30, 1e-4), (60, 2e-5)])
def test_lr_schedule_published_values(epoch, lr):
    assert math.isclose(lr_at_epoch(LrSchedule(), epoch), lr, rel_tol=1e-12)


@given(st.integers(0, 500), st.integers(0, 500))
def test_lr_non_increasing(a, b):
    s = LrSchedule()
    lo, hi = sorted((a, b))
    assert lr_at_epoch(s, hi) <= lr_at_epoch(s, lo)


def test_lr_negative_epoch():
    with pytest.raises(ValueError):
        lr_at_epoch(LrSchedule(), -1)


def test_zero_epochs_keeps_initial_parameters(manifest, tmp_path):
    from stylecode.codec import build_codec

    ckpt = train(TINY.replace(epochs=0), manifest, tmp_path)
    assert ckpt.loss_history == [] and ckpt.epoch == 0
    init = build_codec(TINY)
    for k, v in init.state_dict().items():
        assert torch.equal(v, ckpt.codec_state[k])
    assert (tmp_path / "ckpt_0.pt").exists()


def test_outputs_written(run):
    out, ckpt = run
    assert ckpt.epoch == 3 and len(ckpt.loss_history) == 3
    assert latest_checkpoint(out).name == "ckpt_3.pt"
    assert [p.name for p in sorted(out.glob("ckpt_*.pt"))] == ["ckpt_1.pt", "ckpt_2.pt", "ckpt_3.pt"]
    rows = read_loss_history(out / "loss_history.csv")
    assert [r.to_dict() for r in rows] == [r.to_dict() for r in ckpt.loss_history]


def test_history_recomposes(run):
    _, ckpt = run
    for row in ckpt.loss_history:
        assert abs(row.recompose(ckpt.config) - row.total) <= 1e-9 * max(1.0, row.total)


def test_checkpoint_round_trip(run, tmp_path):
    _, ckpt = run
    save_checkpoint(ckpt, tmp_path / "c.pt")
    back = load_checkpoint(tmp_path / "c.pt")
    assert back.epoch == ckpt.epoch and back.config == ckpt.config
    assert back.rng_state == ckpt.rng_state
    assert [r.to_dict() for r in back.loss_history] == [r.to_dict() for r in ckpt.loss_history]
    for k, v in ckpt.codec_state.items():
        assert torch.equal(back.codec_state[k], v)
    assert back.optimizer_state["param_groups"] == ckpt.optimizer_state["param_groups"]


def test_old_schema_rejected(run, tmp_path):
    _, ckpt = run
    old = Checkpoint(**{**ckpt.__dict__, "schema_version": 0})
    save_checkpoint(old, tmp_path / "old.pt")
    with pytest.raises(UnsupportedSchemaError):
        load_checkpoint(tmp_path / "old.pt")


def test_two_runs_identical(manifest, run, tmp_path):
    _, first = run
    second = train(TINY.replace(epochs=3), manifest, tmp_path)
    assert [r.to_dict() for r in first.loss_history] == [r.to_dict() for r in second.loss_history]
    for k, v in first.codec_state.items():
        assert torch.equal(second.codec_state[k], v)


def test_resume_matches_uninterrupted(manifest, run, tmp_path):
    out, full = run
    resumed = train(TINY.replace(epochs=3), manifest, tmp_path,
                    resume=load_checkpoint(out / "ckpt_1.pt"))
    assert resumed.loss_history[1].to_dict() == full.loss_history[1].to_dict()
    assert resumed.loss_history[2].to_dict() == full.loss_history[2].to_dict()


def test_descriptor_unchanged_by_training(manifest, tmp_path):
    before = make_descriptor(TINY).checksum()
    train(TINY.replace(epochs=1), manifest, tmp_path)
    assert make_descriptor(TINY).checksum() == before


def test_non_finite_loss_aborts(manifest, tmp_path, monkeypatch):
    import stylecode.trainer as trainer

    real = trainer.total_loss

    def poisoned(*args, **kwargs):
        b = real(*args, **kwargs)
        b.cycle = float("nan")
        return b

    monkeypatch.setattr(trainer, "total_loss", poisoned)
    with pytest.raises(NonFiniteLossError, match="cycle.*epoch 0, step 0"):
        train(TINY, manifest, tmp_path)


def test_image_size_mismatch(manifest, tmp_path):
    with pytest.raises(ValueError):
        train(TINY.replace(image_size=64), manifest, tmp_path)


def test_loss_breakdown_dict_round_trip():
    b = LossBreakdown(1.0, 2.0, 3.0, 4.0, 5.0, total=6.0)
    assert LossBreakdown.from_dict(b.to_dict()) == b
