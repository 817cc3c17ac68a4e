"""Stage 1: conditional VAE that sketches low-resolution images.

The encoder sees the image plus the text embedding rendered as an extra
input plane; the decoder sees a latent sample concatenated with a
conditioning-augmentation sample. Both halves are 5x5 stride-2 stacks with
"same" padding, so each layer halves (encoder) or doubles (decoder) the
spatial extent around a 4x4 bottleneck.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cond_aug import COND_DIM, condition, init_cond_aug, kl_to_standard_normal, sample_condition
from .errors import ConfigurationError, DimensionError, NonFiniteLossError
from .layers import (
    LayerGeometry,
    Module,
    batch_norm,
    conv2d,
    conv_transpose2d,
    dense,
    init_params,
)
from .optim import AdamState, adam_step
from .tensor import Tensor

KERNEL = 5
PAD = 2
BOTTLENECK = 4


@dataclass(frozen=True)
class CvaeConfig:
    image_size: int = 64
    embedding_dim: int = 1024
    latent_dim: int = 100
    cond_dim: int = COND_DIM
    base_channels: int = 64
    hidden_dim: int = 2048

    @property
    def num_stages(self) -> int:
        n = math.log2(self.image_size / BOTTLENECK)
        if n < 1 or n != int(n):
            raise ConfigurationError(
                f"image_size must be 4 * 2**k with k >= 1, got {self.image_size}"
            )
        return int(n)

    @property
    def channels(self) -> list:
        return [self.base_channels * 2**i for i in range(self.num_stages)]


class CvaeModel(Module):
    def __init__(self, config: CvaeConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config
        seeds = iter(np.random.SeedSequence(seed).spawn(64))

        def make(name, geometry):
            self.layers[name] = init_params(geometry, np.random.default_rng(next(seeds)), dtype)

        chans = c.channels
        self.layers["cond_aug"] = init_cond_aug(
            c.embedding_dim, c.cond_dim, np.random.default_rng(next(seeds)), dtype
        )
        make("enc.embed", LayerGeometry("dense", c.embedding_dim, c.image_size**2))
        in_c = 4
        for i, out_c in enumerate(chans):
            make(f"enc.conv{i}", LayerGeometry("conv", in_c, out_c, KERNEL, batch_norm=True))
            in_c = out_c
        make("enc.hidden", LayerGeometry("dense", in_c * BOTTLENECK**2, c.hidden_dim))
        make("enc.mu", LayerGeometry("dense", c.hidden_dim, c.latent_dim))
        make("enc.log_var", LayerGeometry("dense", c.hidden_dim, c.latent_dim))

        top = chans[-1]
        make(
            "dec.fc",
            LayerGeometry(
                "dense",
                c.latent_dim + c.cond_dim,
                top * BOTTLENECK**2,
                batch_norm=True,
                norm_channels=top,
            ),
        )
        ups = list(reversed(chans[:-1])) + [3]
        in_c = top
        for i, out_c in enumerate(ups):
            last = i == len(ups) - 1
            make(f"dec.up{i}", LayerGeometry("conv_t", in_c, out_c, KERNEL, batch_norm=not last))
            in_c = out_c

    # ------------------------------------------------------------------

    def encode(self, image, phi_t, mode: str = "train"):
        """Return ``(mu_z, log_var_z)`` for a batch of images in [-1, 1]."""
        c = self.config
        image = self.input(image)
        phi_t = self.input(phi_t)
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"encode: expected (batch, 3, H, W) image, got {image.shape}")
        if image.shape[2] != c.image_size or image.shape[3] != c.image_size:
            raise DimensionError(
                f"encode: image is {image.shape[2]}x{image.shape[3]}, "
                f"model is configured for {c.image_size}x{c.image_size}"
            )
        b = image.shape[0]
        plane = dense(phi_t, self.layers["enc.embed"]).reshape(b, 1, c.image_size, c.image_size)
        h = T.concat([image, plane], axis=1)
        for i in range(c.num_stages):
            layer = self.layers[f"enc.conv{i}"]
            h = conv2d(h, layer, stride=2, padding=PAD)
            h = T.relu(batch_norm(h, layer, mode))
            self._record(f"enc.conv{i}", h)
        h = T.relu(dense(T.flatten(h), self.layers["enc.hidden"]))
        self._record("enc.hidden", h)
        mu = self._record("enc.mu", dense(h, self.layers["enc.mu"]))
        log_var = self._record("enc.log_var", dense(h, self.layers["enc.log_var"]))
        return mu, log_var

    def decode(self, z, c_hat, mode: str = "train") -> Tensor:
        c = self.config
        z, c_hat = self.input(z), self.input(c_hat)
        if z.shape[-1] != c.latent_dim or c_hat.shape[-1] != c.cond_dim:
            raise ConfigurationError(
                f"decode: expected latent {c.latent_dim} and condition {c.cond_dim} values, "
                f"got {z.shape[-1]} and {c_hat.shape[-1]}"
            )
        b = z.shape[0]
        fc = self.layers["dec.fc"]
        h = dense(T.concat([z, c_hat], axis=1), fc)
        h = h.reshape(b, c.channels[-1], BOTTLENECK, BOTTLENECK)
        h = T.relu(batch_norm(h, fc, mode))
        self._record("dec.fc", h)
        n = c.num_stages
        for i in range(n):
            layer = self.layers[f"dec.up{i}"]
            h = conv_transpose2d(h, layer, stride=2, padding=PAD, output_padding=1)
            if i < n - 1:
                h = T.relu(batch_norm(h, layer, mode))
            else:
                h = T.tanh(h)
            self._record(f"dec.up{i}", h)
        return h

    def condition(self, phi_t, rng: np.random.Generator):
        """Conditioning-augmentation sample ``(c_hat, mu, log_var)``."""
        return condition(self.input(phi_t), self.layers["cond_aug"], rng)


def cvae_loss(x, x_hat, mu_z, log_var_z):
    """Return ``(recon, kl, total)``.

    recon is the per-image sum of squared pixel errors (unit-variance Gaussian
    negative log-likelihood without its constant) averaged over the batch.
    """
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"cvae_loss: x {x.shape} and x_hat {x_hat.shape} differ")
    diff = x_hat - x
    per_image = T.square(diff).reshape(x.shape[0], -1).sum(axis=1)
    recon = per_image.mean()
    kl = kl_to_standard_normal(mu_z, log_var_z)
    return recon, kl, recon + kl


def cvae_forward(model: CvaeModel, images, embeddings, rng: np.random.Generator, lam: float = 1.0):
    """Training-mode forward pass returning the loss terms as tensors."""
    images = model.input(images)
    c_hat, mu_c, lv_c = model.condition(embeddings, rng)
    mu_z, lv_z = model.encode(images, embeddings, "train")
    eps = rng.standard_normal(mu_z.shape).astype(mu_z.dtype)
    z = sample_condition(mu_z, lv_z, eps)
    x_hat = model.decode(z, c_hat, "train")
    recon, kl, total = cvae_loss(images, x_hat, mu_z, lv_z)
    kl_cond = kl_to_standard_normal(mu_c, lv_c)
    objective = total + kl_cond * lam
    return {"recon": recon, "kl": kl, "kl_cond": kl_cond, "total": objective}


def cvae_train_step(
    model: CvaeModel,
    batch,
    state: AdamState,
    lr: float,
    rng: np.random.Generator,
    lam: float = 1.0,
):
    """One optimizer step on a batch of ``(images, embeddings)``.

    Returns the loss terms as floats; ``total`` is the optimized objective
    (reconstruction + latent KL + lam * conditioning KL).
    """
    images, embeddings = model.input(batch[0]), model.input(batch[1])
    model.trace = []
    try:
        terms = cvae_forward(model, images, embeddings, rng, lam)
        total = terms["total"]
        if not np.isfinite(total.data).all():
            where = model.first_nonfinite() or "loss"
            raise NonFiniteLossError(f"non-finite stage-1 loss; first non-finite output: {where}")
    finally:
        model.trace = None
    model.zero_grad()
    total.backward()
    adam_step(model.named_parameters(), state, lr)
    return {k: float(v.data) for k, v in terms.items()}


def cvae_generate(model: CvaeModel, phi_t, rng: np.random.Generator, return_condition=False):
    """Sample sketches from the prior: z ~ N(0, I), c_hat from conditioning augmentation."""
    with T.no_grad():
        c_hat, mu_c, lv_c = model.condition(phi_t, rng)
        z = rng.standard_normal((c_hat.shape[0], model.config.latent_dim)).astype(model.dtype)
        image = model.decode(Tensor(z), c_hat, "eval")
    if return_condition:
        return image, c_hat, mu_c, lv_c
    return image
