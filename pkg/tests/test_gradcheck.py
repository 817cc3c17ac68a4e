import numpy as np
import pytest

from cvaegan import gradcheck
from cvaegan import tensor as T
from cvaegan.tensor import Tensor


def test_relative_error_examples():
    assert gradcheck.relative_error(1.0, 1.0, 1e-6) == 0.0
    assert gradcheck.relative_error(1.0, 1.1, 1e-6) == pytest.approx(0.1 / 1.1)
    assert gradcheck.relative_error(0.0, 1e-9, 1e-6) == pytest.approx(1e-3)


def test_detects_wrong_gradient(rng):
    x = rng.standard_normal(5)
    worst, n, kinks = gradcheck.check_gradients(lambda x: (x * x).sum(), {"x": x}, rng, 5)
    assert worst < gradcheck.TOLERANCE and n == 5 and kinks == 0
    # one factor detached from the tape: backward yields x instead of 2x
    broken = lambda x: (x * Tensor(x.data)).sum()
    worst, _, _ = gradcheck.check_gradients(broken, {"x": x}, rng, 5)
    assert worst == pytest.approx(0.5, abs=1e-4)


def test_kink_fallback_accepts_relu_at_kink(rng):
    x = np.array([1e-7, 0.5, -0.3])
    worst, _, kinks = gradcheck.check_gradients(lambda x: T.relu(x).sum(), {"x": x}, rng, 3)
    assert kinks == 1 and worst < gradcheck.TOLERANCE


def test_op_suite_one_seed():
    results = gradcheck.run_suite(seeds=[0], include_models=False)
    names = {r.name for r in results}
    assert {"conv2d", "conv_transpose2d", "batch_norm_4d", "cvae_loss", "gan_losses"} <= names
    bad = [r for r in results if not r.passed]
    assert not bad, gradcheck.format_results(bad)


def test_noise_level_recovers_injected_noise():
    jitter = np.random.default_rng(5)
    noisy = lambda x: (x * x).sum() + float(jitter.normal(0, 1e-10))
    sigma = gradcheck.noise_level(noisy, {"x": Tensor(np.linspace(-1, 1, 6))})
    assert 0.3e-10 < sigma < 3e-10


def test_noise_level_of_smooth_function_is_near_ulp():
    x = Tensor(np.linspace(-1, 1, 6))
    sigma = gradcheck.noise_level(lambda x: (x * x * x).sum(), {"x": x})
    assert sigma < 10 * np.finfo(np.float64).eps
    np.testing.assert_array_equal(x.data, np.linspace(-1, 1, 6))


def test_roundoff_bound_uses_measured_noise():
    eps = np.finfo(np.float64).eps
    assert gradcheck.roundoff_bound(0.5, 1e-5) == 4 * eps / 1e-5
    assert gradcheck.roundoff_bound(0.5, 1e-5, noise=1e-14) == 4e-14 / 1e-5
