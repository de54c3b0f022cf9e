import time
from pathlib import Path

import pytest

from stylecode.core import load_config
from stylecode.forge import forge
from stylecode.trainer import train

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"

# Held-out contents: a content seed never used for training or for choosing
# the desk hyperparameters, stylized by the training style bank.
HELD_OUT_CONTENT_SEED = 20261015
TRAIN_CONTENT_SEED, FORGE_SEED = 0, 1


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Two identical deterministic desk-scale runs (about 2.5 min each on one core)."""
    root = tmp_path_factory.mktemp("desk")
    cfg = load_config(DESK_CONFIG)
    train_m = forge(root / "data", 8, 4, 32, content_seed=TRAIN_CONTENT_SEED, forge_seed=FORGE_SEED)
    held_m = forge(root / "held", 8, 4, 32, content_seed=HELD_OUT_CONTENT_SEED, forge_seed=FORGE_SEED)
    runs, times = [], []
    for i in range(2):
        t0 = time.perf_counter()
        runs.append(train(cfg, train_m, root / f"run{i}", deterministic=True, keep_last=1))
        times.append(time.perf_counter() - t0)
    return dict(cfg=cfg, train=train_m, held=held_m, runs=runs, times=times)
