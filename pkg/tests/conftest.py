import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from mmexplain.core import DESK_CONFIG  # noqa: E402
from mmexplain.synthetic import generate_synthetic  # noqa: E402

# Small enough for sub-second forwards in unit tests.
TINY = DESK_CONFIG.replace(d_model=32, n_heads=4, n_layers=1, gat_heads=2, seg_input_size=32, seg_channels=8)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def synth32():
    return generate_synthetic(32, seed=3, image_size=32, app_dim=TINY.app_dim)


# One line per acceptance criterion, filled in by tests/test_acceptance.py.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
