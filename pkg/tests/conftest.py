import os
from pathlib import Path

import numpy as np
import pytest

from assoclearn.autodiff import Tape

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("ASSOCLEARN_MNIST", ROOT / "data" / "mnist"))


def mnist_paths():
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    out = {}
    for key, name in names.items():
        for candidate in (MNIST_DIR / name, MNIST_DIR / f"{name}.gz"):
            if candidate.exists():
                out[key] = str(candidate)
                break
        else:
            return None
    return out


@pytest.fixture
def tape64():
    return Tape(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, passed, detail)."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.acceptance_lines[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
