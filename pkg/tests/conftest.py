from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from fedelastic import model

MNIST_DIR = Path(os.environ.get("FEDELASTIC_MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return all((MNIST_DIR / f).exists() for f in (
        "train-images.idx3-ubyte", "train-labels.idx1-ubyte",
        "t10k-images.idx3-ubyte", "t10k-labels.idx1-ubyte"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs():
    return model.make_synthetic(4, 6, 400, 2.0, seed=3)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
