import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from sarseg.config import preset  # noqa: E402
from sarseg.model import build_model  # noqa: E402


@pytest.fixture(autouse=True)
def _double_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def tiny_cfg():
    return preset("desk-tiny", num_classes=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
