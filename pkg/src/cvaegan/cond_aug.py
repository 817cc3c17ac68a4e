"""Conditioning augmentation.

A text embedding is mapped by one dense layer to the mean and log-variance
of a diagonal Gaussian in conditioning space. Conditions are drawn by
reparameterization so gradients reach the mean and variance but not the
noise, and the Gaussian is pulled toward N(0, I) with a KL penalty.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .layers import LayerGeometry, LayerParams, dense, init_params
from .tensor import Tensor

COND_DIM = 128


def init_cond_aug(embedding_dim: int, cond_dim: int = COND_DIM, rng=0, dtype=np.float32):
    return init_params(LayerGeometry("dense", embedding_dim, 2 * cond_dim), rng, dtype)


def _as_batch(x) -> Tensor:
    x = T.as_tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


def embed_to_gaussian(phi_t, params: LayerParams):
    """Return ``(mu, log_var)``, each (batch, cond_dim)."""
    phi_t = _as_batch(phi_t)
    expected, width = params.weight.shape
    if phi_t.shape[1] != expected:
        raise ConfigurationError(
            f"embedding has {phi_t.shape[1]} values but the conditioning head expects {expected}"
        )
    out = dense(phi_t, params)
    half = width // 2
    return out[:, :half], out[:, half:]


def sample_condition(mu, log_var, epsilon) -> Tensor:
    """c_hat = mu + exp(log_var / 2) * epsilon."""
    mu, log_var = T.as_tensor(mu), T.as_tensor(log_var)
    epsilon = np.asarray(epsilon, dtype=mu.dtype)
    return mu + T.exp(log_var * 0.5) * epsilon


def kl_to_standard_normal(mu, log_var) -> Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)).

    Summed over the last axis; for batched (2-D) input the per-row values are
    averaged over the batch.
    """
    mu, log_var = T.as_tensor(mu), T.as_tensor(log_var)
    # expm1 keeps exp(lv) - 1 - lv >= 0 when lv is tiny
    per_dim = T.square(mu) + (T.expm1(log_var) - log_var)
    per_row = per_dim.sum(axis=-1) * 0.5
    return per_row.mean() if per_row.ndim else per_row


def condition(phi_t, params: LayerParams, rng: np.random.Generator):
    """Embed, sample, and return ``(c_hat, mu, log_var)``."""
    mu, log_var = embed_to_gaussian(phi_t, params)
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return sample_condition(mu, log_var, eps), mu, log_var
