import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

REPO = Path(__file__).resolve().parents[1]


def data_root():
    return Path(os.environ.get("MARGINTRACK_DATA_ROOT", REPO / "data"))


@pytest.fixture(scope="session")
def mnist_dir():
    d = data_root() / "mnist"
    if not (d / "train-images-idx3-ubyte").exists() and not (d / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST IDX files not found under {d}")
    return d


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
