"""Compiled-extension kernels agree with the numpy reference."""

import subprocess
import sys

import numpy as np
import pytest

from alien_ue._kernels import BACKEND, pyref

try:
    from alien_ue._kernels import _native
except ImportError:
    _native = None

needs_native = pytest.mark.skipif(_native is None, reason="compiled extension not built")


def _random_inputs(seed, n=64, c=7):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, c)) * 4
    e = rng.integers(0, 2, size=n).astype(np.float64)
    u0 = rng.uniform(0, 1, size=n)
    return z, e, u0


@needs_native
@pytest.mark.parametrize("seed", range(5))
def test_softmax_rows_match(seed):
    z, _, _ = _random_inputs(seed)
    np.testing.assert_allclose(_native.softmax_rows(z), pyref.softmax_rows(z), rtol=1e-14)


@needs_native
@pytest.mark.parametrize("seed", range(5))
def test_entropy_rows_match(seed):
    z, _, _ = _random_inputs(seed)
    p = pyref.softmax_rows(z)
    np.testing.assert_allclose(_native.entropy_rows(p), pyref.entropy_rows(p), rtol=1e-13)


@needs_native
@pytest.mark.parametrize("seed", range(5))
def test_entropy_grad_rows_match(seed):
    z, _, _ = _random_inputs(seed)
    p = pyref.softmax_rows(z)
    np.testing.assert_allclose(
        _native.entropy_grad_rows(p), pyref.entropy_grad_rows(p), rtol=1e-12, atol=1e-16
    )


@needs_native
@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("alpha", [0.0, 0.1, 1.0])
def test_alien_backward_rows_match(seed, alpha):
    z, e, u0 = _random_inputs(seed)
    p = pyref.softmax_rows(z)
    u_n, bce_n, reg_n, dz_n = _native.alien_backward_rows(p, e, u0, alpha)
    u_p, bce_p, reg_p, dz_p = pyref.alien_backward_rows(p, e, u0, alpha)
    np.testing.assert_allclose(u_n, u_p, rtol=1e-13)
    assert bce_n == pytest.approx(bce_p, rel=1e-12)
    assert reg_n == pytest.approx(reg_p, rel=1e-12)
    np.testing.assert_allclose(dz_n, dz_p, rtol=1e-11, atol=1e-18)


@needs_native
def test_extreme_probabilities_clamped_identically():
    # One-hot rows exercise the log clamp in both backends.
    p = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1 / 3, 1 / 3, 1 / 3]])
    e = np.array([1.0, 0.0, 1.0])
    u0 = np.array([0.0, 0.5, 1.0])
    for alpha in (0.0, 0.5):
        out_n = _native.alien_backward_rows(p, e, u0, alpha)
        out_p = pyref.alien_backward_rows(p, e, u0, alpha)
        for a, b in zip(out_n, out_p):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-18)


def test_backend_override_env():
    code = (
        "import alien_ue; print(alien_ue.KERNEL_BACKEND)"
    )
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={"PATH": "/usr/bin:/bin", "ALIEN_UE_BACKEND": "python"},
        capture_output=True,
        text=True,
    )
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "python"


def test_default_backend_reported():
    assert BACKEND in ("native", "python")
