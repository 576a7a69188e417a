import os
import sys
from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def central_difference(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of a scalar function of an array, by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn(x)
        flat[i] = old - eps
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol, atol=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(numeric), np.abs(analytic)) + atol
    assert np.all(err <= bound), f"max violation {np.max(err - bound):.3e}"


@pytest.fixture(scope="session")
def surrogate_corpus(tmp_path_factory) -> Path:
    from latent_ecg.synthetic import SurrogateConfig, write_surrogate_corpus

    root = tmp_path_factory.mktemp("surrogate")
    write_surrogate_corpus(root, SurrogateConfig(n_records=4, n_paced=1, duration_s=60.0, seed=3))
    return root


def corpus_root() -> Path | None:
    root = os.environ.get("ECG_CORPUS_ROOT")
    return Path(root) if root else None


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
