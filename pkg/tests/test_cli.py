import json

import pytest
import yaml
from PIL import Image

from stylecode.cli import main
from stylecode.core import load_image
from stylecode.stylist import reconstruct, transfer
from stylecode.trainer import load_checkpoint

TINY = dict(schema_version=1, enc_width=4, descriptor_width=0.125, batch_size=8,
            triplets_per_batch=4, epochs=2, c_ch=4, s_ch=2)


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    assert main(["forge", "--out", str(ws / "data"), "--contents", "3", "--styles", "2"]) == 0
    (ws / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    assert main(["train", "--config", str(ws / "tiny.yaml"), "--data", str(ws / "data"),
                 "--out", str(ws / "run"), "--deterministic"]) == 0
    return ws


def test_forge_byte_identical(workspace, tmp_path):
    assert main(["forge", "--out", str(tmp_path / "again"), "--contents", "3", "--styles", "2"]) == 0
    assert tree(workspace / "data") == tree(tmp_path / "again")


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "loss_history.csv").exists()
    assert (run / "ckpt_1.pt").exists() and (run / "ckpt_2.pt").exists()
    assert yaml.safe_load((run / "config.yaml").read_text())["enc_width"] == 4


def test_resume_latest(workspace, tmp_path):
    run = workspace / "run"
    assert main(["train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
                 "--out", str(run), "--deterministic", "--resume", "latest", "--epochs", "3"]) == 0
    assert load_checkpoint(run / "ckpt_3.pt").epoch == 3


def test_reconstruct_and_transfer(workspace, tmp_path):
    ckpt = str(workspace / "run" / "ckpt_2.pt")
    a = workspace / "data" / "content_0" / "style_0.png"
    b = workspace / "data" / "content_1" / "original.png"
    assert main(["reconstruct", "--ckpt", ckpt, "--in", str(a), "--out", str(tmp_path / "r.png")]) == 0
    assert main(["transfer", "--ckpt", ckpt, "--content", str(a), "--style", str(b),
                 "--out", str(tmp_path / "t.png")]) == 0
    model = load_checkpoint(ckpt)
    assert torch_equal_u8(load_image(tmp_path / "r.png"), reconstruct(model, load_image(a)))
    assert torch_equal_u8(load_image(tmp_path / "t.png"), transfer(model, load_image(a), load_image(b)))


def torch_equal_u8(saved, img):
    from stylecode.core import quantize
    return bool((saved == quantize(img)).all())


def test_interpolate_grid_size(workspace, tmp_path):
    d = workspace / "data"
    assert main(["interpolate", "--ckpt", str(workspace / "run" / "ckpt_2.pt"),
                 "--content", str(d / "content_0" / "original.png"), str(d / "content_1" / "original.png"),
                 "--style-a", str(d / "content_2" / "style_0.png"),
                 "--style-b", str(d / "content_2" / "style_1.png"),
                 "--alphas", "0,0.1,0.3,0.5,0.7,0.9,1.0", "--out", str(tmp_path / "i.png")]) == 0
    with Image.open(tmp_path / "i.png") as im:
        assert im.size[0] == 7 * 32 + 6 * 2
        assert im.size[1] > 2 * 32 + 2  # alpha labels add a band on top


def test_analyze(workspace, tmp_path):
    out = tmp_path / "an"
    assert main(["analyze", "--ckpt", str(workspace / "run" / "ckpt_2.pt"),
                 "--data", str(workspace / "data"), "--out", str(out), "--triplets", "50"]) == 0
    pca = json.loads((out / "pca_style_codes.json").read_text())
    assert len(pca["points"]) == 3 * 2
    assert (out / "pca_style_codes.png").stat().st_size > 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["triplet_accuracy"]) == {"content", "style"}


def test_errors_exit_nonzero(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("lambda_s: -1\n")
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "x")]) == 1
    assert "lambda_s" in capsys.readouterr().err
    assert main(["reconstruct", "--ckpt", str(tmp_path / "missing.pt"), "--in", "x.png",
                 "--out", "y.png"]) == 1


def test_bad_alphas_rejected(workspace):
    with pytest.raises(SystemExit):
        main(["interpolate", "--ckpt", "c", "--content", "a", "--style-a", "b", "--style-b", "c",
              "--alphas", "x,y", "--out", "o"])
