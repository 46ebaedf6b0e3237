import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcu_lab import _backend
from mcu_lab import _kernels_py as py

compiled = _backend.compiled_kernels
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def inputs(seed, N, d, hidden, C):
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((hidden, d))
    b1 = rng.standard_normal(hidden)
    Wout = rng.standard_normal((C, hidden))
    bout = rng.standard_normal(C)
    X = rng.standard_normal((N, d))
    H = np.tanh(X @ W1.T + b1)
    return W1, b1, Wout, bout, X, H, rng.standard_normal((N, hidden)), rng.standard_normal((N, C))


dims = dict(seed=st.integers(0, 10**6), N=st.integers(1, 12), d=st.integers(1, 9),
            hidden=st.integers(1, 9), C=st.integers(1, 5))


@needs_compiled
class TestAgreement:
    @settings(max_examples=40, deadline=None)
    @given(**dims)
    def test_forward(self, seed, N, d, hidden, C):
        W1, b1, Wout, bout, X, *_ = inputs(seed, N, d, hidden, C)
        for a, b in zip(compiled.forward_batch(W1, b1, Wout, bout, X), py.forward_batch(W1, b1, Wout, bout, X)):
            np.testing.assert_allclose(np.asarray(a), b, rtol=1e-12, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(**dims)
    def test_backward(self, seed, N, d, hidden, C):
        _, _, Wout, _, X, H, g_h, g_z = inputs(seed, N, d, hidden, C)
        for a, b in zip(compiled.backward_batch(Wout, X, H, g_h, g_z), py.backward_batch(Wout, X, H, g_h, g_z)):
            np.testing.assert_allclose(np.asarray(a), b, rtol=1e-11, atol=1e-11)

    @settings(max_examples=40, deadline=None)
    @given(**dims)
    def test_per_sample(self, seed, N, d, hidden, C):
        _, _, Wout, _, X, H, g_h, g_z = inputs(seed, N, d, hidden, C)
        np.testing.assert_allclose(np.asarray(compiled.per_sample_grads(Wout, X, H, g_h, g_z)),
                                   py.per_sample_grads(Wout, X, H, g_h, g_z), rtol=1e-12, atol=1e-12)


def test_selected_backend_consistent():
    assert _backend.BACKEND == ("compiled" if compiled is not None else "python")


def test_forced_fallback():
    env = dict(os.environ, MCU_LAB_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "import mcu_lab; print(mcu_lab.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_fallback_runs_pipeline():
    code = ("from mcu_lab.experiments import ScenarioConfig, build_lab\n"
            "lab = build_lab(ScenarioConfig(d=16, hidden=8, n_forget=60, n_retain=60, pretrain_steps=20, "
            "min_accuracy=None), 0)\nprint(lab.model_o.n_params)")
    env = dict(os.environ, MCU_LAB_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == str(16 * 8 + 8 + 8 * 4 + 4)
