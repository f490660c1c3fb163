import numpy as np
import pytest
import torch

from actionmachine.config import toy_config
from actionmachine.synthdata import SynthConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Eight short low-resolution videos, two per class."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = SynthConfig(num_train=8, num_test=4, num_classes=4, frames=12, frame_w=160,
                      frame_h=120, bias_mode="scene", seed=3)
    return generate_dataset(cfg, root)


@pytest.fixture
def fast_cfg():
    """Toy network at the smallest input that keeps every stage non-empty."""
    return toy_config(epochs=1, batch_size=4, crop_size=64, clip_len=4, clip_stride=2,
                      test_clips=2, head_channels=16)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion."""
    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE[criterion] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(_ACCEPTANCE[key])
