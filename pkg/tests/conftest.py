import numpy as np
import pytest

from mcu_lab.toymodel import init_model


def central_diff(f, theta, step=1e-5):
    """Central finite differences of scalar ``f`` at every coordinate of ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        out[i] = (f(theta + e) - f(theta - e)) / (2 * step)
    return out


def rel_err(analytic, numeric):
    """Largest absolute deviation relative to the largest numeric entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def random_orthonormal(rng, K, d):
    Q, _ = np.linalg.qr(rng.standard_normal((d, K)))
    return Q.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return init_model(4, 6, 3, seed=7)


# --- acceptance summary --------------------------------------------------------------

_ACCEPTANCE: dict = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
