import numpy as np
import pytest

from refground.config import ExperimentConfig


def finite_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def small_cfg():
    return ExperimentConfig(d=16, L=8, P=4, image_size=8, vocab=256, heads=4, N_experts=4, K_experts=2)


@pytest.fixture
def cfg():
    return ExperimentConfig()


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    log = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        log[n] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
