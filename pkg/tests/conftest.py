import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 internal + 10 external slides, 30 tissue patches each."""
    from cfpath.data.dataset import Dataset
    from cfpath.data.synthetic import SyntheticDatasetSpec, generate_synthetic

    out = tmp_path_factory.mktemp("tiny_ds")
    spec = SyntheticDatasetSpec(num_slides=12, external_slides=10, patches_per_slide=30, seed=3)
    generate_synthetic(spec, out)
    return Dataset(out)


@pytest.fixture
def tiny_config():
    from cfpath.config import TrainConfig

    return TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, ssl_patches_per_slide=8,
                       input_size=32, proj_dim=32, proj_hidden=32, base_lr=1e-3)


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_dataset, tmp_path_factory):
    from cfpath.config import TrainConfig
    from cfpath.trainer import run_pretraining

    cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=16, ssl_patches_per_slide=4,
                      input_size=32, proj_dim=32, proj_hidden=32)
    ckpt, _ = run_pretraining(cfg, tiny_dataset, tmp_path_factory.mktemp("tiny_ckpt"))
    return ckpt


ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
