import math
from pathlib import Path

import numpy as np
import pytest

from solvers.lqr import LqProblem

ROOT = Path(__file__).resolve().parent.parent

# Positive root of P^2 + 3P - 1 = 0.
SCALAR_P = (math.sqrt(13.0) - 3.0) / 2.0


@pytest.fixture
def configs_dir() -> Path:
    return ROOT / "configs"


@pytest.fixture
def fixtures_dir() -> Path:
    return ROOT / "fixtures"


@pytest.fixture
def scalar_lq() -> LqProblem:
    return LqProblem.scalar(a=0.0, b=1.0, n=1.0, m=1.0, alpha=3.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread_default(monkeypatch):
    monkeypatch.setenv("CTRL_ITER_THREADS", "2")
