import shutil
import tempfile

import numpy as np
import pytest

from aeon import MemoryEngine, QUANT_FP32
from aeon.kernels import normalize

# filled by tests/test_acceptance.py; echoed after the run so every
# criterion's pass/fail line is visible regardless of capture mode
ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, status in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"[CRITERION] {name}: {status}")


@pytest.fixture
def tmpdir_engine():
    """Factory for throwaway engines; everything cleaned up at teardown."""
    dirs = []
    engines = []

    def make(dim=64, quant=QUANT_FP32, **kw):
        d = tempfile.mkdtemp(prefix="aeon-test-")
        dirs.append(d)
        eng = MemoryEngine.create(d, dim=dim, quant=quant, **kw)
        engines.append(eng)
        return eng

    yield make
    for eng in engines:
        try:
            eng.close()
        except Exception:
            pass
    for d in dirs:
        shutil.rmtree(d, ignore_errors=True)


def random_normalized(rng, dim):
    return normalize(rng.standard_normal(dim))


def random_matrix(rng, n, dim):
    m = rng.standard_normal((n, dim))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return m.astype(np.float32)
