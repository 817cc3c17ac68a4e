import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cvaegan.cond_aug import (
    COND_DIM,
    condition,
    embed_to_gaussian,
    init_cond_aug,
    kl_to_standard_normal,
    sample_condition,
)
from cvaegan.errors import ConfigurationError
from cvaegan.tensor import Tensor

vec = arrays(np.float64, 6, elements=st.floats(-3, 3))


def test_zero_map_gives_standard_gaussian():
    p = init_cond_aug(64, rng=0, dtype=np.float64)
    p.weight.data[...] = 0.0
    mu, lv = embed_to_gaussian(np.ones(64), p)
    assert mu.shape == lv.shape == (1, COND_DIM)
    np.testing.assert_array_equal(mu.data, 0.0)
    np.testing.assert_array_equal(lv.data, 0.0)


def test_identity_weight_copies_inputs():
    p = init_cond_aug(128, rng=0, dtype=np.float64)
    p.weight.data[...] = 0.0
    p.weight.data[:, :128] = np.eye(128)
    phi = np.arange(128.0)
    mu, _ = embed_to_gaussian(phi, p)
    np.testing.assert_array_equal(mu.data[0], phi)


def test_embedding_dim_mismatch():
    with pytest.raises(ConfigurationError):
        embed_to_gaussian(np.ones(10), init_cond_aug(64, rng=0))


def test_sample_examples():
    e = np.array([0.3, -1.2])
    np.testing.assert_array_equal(sample_condition([1.0, 2.0], [0.5, 0.1], [0.0, 0.0]).data,
                                  [1.0, 2.0])
    np.testing.assert_array_equal(sample_condition([0.0, 0.0], [0.0, 0.0], e).data, e)
    assert sample_condition(1.0, math.log(4.0), 0.5).item() == pytest.approx(2.0)


def test_sample_grad_flows_to_mu_and_log_var_only():
    mu, lv = Tensor([0.5], requires_grad=True), Tensor([0.2], requires_grad=True)
    eps = np.array([1.5])
    sample_condition(mu, lv, eps).sum().backward()
    assert mu.grad[0] == 1.0
    assert lv.grad[0] == pytest.approx(0.5 * math.exp(0.1) * 1.5)


def test_kl_examples():
    assert kl_to_standard_normal([0.0], [0.0]).item() == 0.0
    assert kl_to_standard_normal([1.0], [0.0]).item() == pytest.approx(0.5, abs=1e-12)
    assert kl_to_standard_normal([0.0], [1.0]).item() == pytest.approx(0.5 * (math.e - 2), abs=1e-12)


def test_kl_batch_is_mean_of_rows():
    mu = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert kl_to_standard_normal(mu, np.zeros_like(mu)).item() == pytest.approx(0.25)


@given(vec, vec)
def test_kl_nonnegative(mu, lv):
    assert kl_to_standard_normal(mu, lv).item() >= 0.0


@given(vec)
def test_kl_grad_wrt_mu_is_mu(mu):
    t = Tensor(mu, requires_grad=True)
    kl_to_standard_normal(t, np.zeros_like(mu)).backward()
    np.testing.assert_array_equal(t.grad, mu)


def test_sampling_mean_converges():
    mu, lv = np.array([0.5, -1.0]), np.array([0.0, 1.0])
    eps = np.random.default_rng(0).standard_normal((100_000, 2))
    draws = sample_condition(np.broadcast_to(mu, eps.shape), np.broadcast_to(lv, eps.shape), eps)
    bound = 4 * np.exp(lv / 2) / math.sqrt(100_000)
    assert np.all(np.abs(draws.data.mean(axis=0) - mu) < bound)


def test_condition_deterministic_per_seed():
    p = init_cond_aug(8, 4, rng=1)
    phi = np.ones((2, 8), np.float32)
    a = condition(phi, p, np.random.default_rng(5))[0].data
    b = condition(phi, p, np.random.default_rng(5))[0].data
    np.testing.assert_array_equal(a, b)
