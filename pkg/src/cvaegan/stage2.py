"""Stage 2: conditional GAN refining stage-1 sketches to 4x resolution.

The generator downsamples the sketch three times, joins a projected copy of
the conditioning sample, runs residual blocks at the bottleneck, and
upsamples five times. The discriminator reduces its input with 5x5 stride-2
convolutions to a 4x4x128 map (2048 features), joins a projected text
embedding, reduces to 512 features, and ends in a sigmoid unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cond_aug import COND_DIM, kl_to_standard_normal
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
from .stage1 import CvaeModel, cvae_generate
from .tensor import Tensor

KERNEL = 5
PAD = 2
LEAK = 0.2
PROB_CLAMP = 1e-7
G_OBJECTIVES = ("saturating", "non_saturating")
D_FEATURE_CHANNELS = 128  # 4x4x128 = 2048 features
D_REDUCED_CHANNELS = 32  # 4x4x32 = 512 features


@dataclass(frozen=True)
class GanConfig:
    stage1_size: int = 64
    embedding_dim: int = 1024
    cond_dim: int = COND_DIM
    g_base: int = 64
    g_cond_channels: int = 128
    num_res_blocks: int = 2
    d_base: int = 16
    d_cond_channels: int = 128

    def __post_init__(self):
        if self.stage1_size % 8 or self.stage1_size < 8:
            raise ConfigurationError(
                f"stage-2 input size must be a positive multiple of 8, got {self.stage1_size}"
            )
        n = math.log2(self.stage1_size)
        if n != int(n):
            raise ConfigurationError(f"stage-2 input size must be a power of two")

    @property
    def output_size(self) -> int:
        return 4 * self.stage1_size

    @property
    def d_channels(self) -> list:
        n = int(math.log2(self.output_size // 4))
        chans = [min(D_FEATURE_CHANNELS, self.d_base * 2**i) for i in range(n)]
        chans[-1] = D_FEATURE_CHANNELS
        return chans


def _seeded(seed):
    seeds = iter(np.random.SeedSequence(seed).spawn(64))
    return lambda: np.random.default_rng(next(seeds))


class Generator(Module):
    def __init__(self, config: GanConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = _seeded(seed)
        g = config.g_base
        down = [g, 2 * g, 4 * g]
        in_c = 3
        for i, out_c in enumerate(down):
            self.layers[f"down{i}"] = init_params(
                LayerGeometry("conv", in_c, out_c, KERNEL, batch_norm=True), rng(), dtype
            )
            in_c = out_c
        self.layers["cond"] = init_params(
            LayerGeometry("dense", config.cond_dim, config.g_cond_channels), rng(), dtype
        )
        width = in_c + config.g_cond_channels
        for j in range(config.num_res_blocks):
            for part in ("a", "b"):
                self.layers[f"res{j}.{part}"] = init_params(
                    LayerGeometry("conv", width, width, 3, batch_norm=True), rng(), dtype
                )
        ups = [4 * g, 2 * g, g, max(g // 2, 1), 3]
        in_c = width
        for i, out_c in enumerate(ups):
            self.layers[f"up{i}"] = init_params(
                LayerGeometry("conv_t", in_c, out_c, KERNEL, batch_norm=i < len(ups) - 1),
                rng(),
                dtype,
            )
            in_c = out_c

    def residual_block(self, x: Tensor, j: int, mode: str, update_stats: bool = True) -> Tensor:
        a, b = self.layers[f"res{j}.a"], self.layers[f"res{j}.b"]
        h = T.relu(batch_norm(conv2d(x, a, 1, 1), a, mode, update_stats=update_stats))
        h = batch_norm(conv2d(h, b, 1, 1), b, mode, update_stats=update_stats)
        return x + h

    def __call__(self, s0, c_hat, mode: str = "train", update_stats: bool = True) -> Tensor:
        return generate(self, s0, c_hat, mode, update_stats)


def generate(gen: Generator, s0, c_hat, mode: str = "train", update_stats: bool = True) -> Tensor:
    """Refine a batch of sketches (B, 3, S, S) into (B, 3, 4S, 4S) images."""
    cfg = gen.config
    s0, c_hat = gen.input(s0), gen.input(c_hat)
    if s0.ndim != 4 or s0.shape[1] != 3 or s0.shape[2:] != (cfg.stage1_size,) * 2:
        raise DimensionError(
            f"generate: expected (batch, 3, {cfg.stage1_size}, {cfg.stage1_size}) sketch, "
            f"got {s0.shape}"
        )
    h = s0
    for i in range(3):
        layer = gen.layers[f"down{i}"]
        h = conv2d(h, layer, stride=2, padding=PAD)
        h = T.relu(batch_norm(h, layer, mode, update_stats=update_stats))
        gen._record(f"down{i}", h)
    b, _, hh, ww = h.shape
    proj = T.relu(dense(c_hat, gen.layers["cond"]))
    grid = T.broadcast_to(proj.reshape(b, -1, 1, 1), (b, proj.shape[1], hh, ww))
    h = T.concat([h, grid], axis=1)
    for j in range(cfg.num_res_blocks):
        h = gen._record(f"res{j}", gen.residual_block(h, j, mode, update_stats))
    for i in range(5):
        layer = gen.layers[f"up{i}"]
        h = conv_transpose2d(h, layer, stride=2, padding=PAD, output_padding=1)
        if i < 4:
            h = T.relu(batch_norm(h, layer, mode, update_stats=update_stats))
        else:
            h = T.tanh(h)
        gen._record(f"up{i}", h)
    return h


class Discriminator(Module):
    def __init__(self, config: GanConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = _seeded(seed)
        in_c = 3
        for i, out_c in enumerate(config.d_channels):
            self.layers[f"conv{i}"] = init_params(
                LayerGeometry("conv", in_c, out_c, KERNEL, batch_norm=i > 0), rng(), dtype
            )
            in_c = out_c
        self.layers["cond"] = init_params(
            LayerGeometry("dense", config.embedding_dim, config.d_cond_channels), rng(), dtype
        )
        self.layers["reduce"] = init_params(
            LayerGeometry(
                "conv", in_c + config.d_cond_channels, D_REDUCED_CHANNELS, 1, batch_norm=True
            ),
            rng(),
            dtype,
        )
        self.layers["head"] = init_params(
            LayerGeometry("dense", D_REDUCED_CHANNELS * 16, 1), rng(), dtype
        )

    def __call__(self, image, phi_t, mode: str = "train", update_stats: bool = True) -> Tensor:
        return discriminate(self, image, phi_t, mode, update_stats)


def discriminate(disc: Discriminator, image, phi_t, mode="train", update_stats=True) -> Tensor:
    """Probability (B,) that each (image, embedding) pair is real."""
    cfg = disc.config
    image, phi_t = disc.input(image), disc.input(phi_t)
    size = cfg.output_size
    if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (size, size):
        raise DimensionError(
            f"discriminate: expected (batch, 3, {size}, {size}) image, got {image.shape}"
        )
    if phi_t.shape[-1] != cfg.embedding_dim:
        raise DimensionError(
            f"discriminate: embedding has {phi_t.shape[-1]} values, expected {cfg.embedding_dim}"
        )
    h = image
    for i in range(len(cfg.d_channels)):
        layer = disc.layers[f"conv{i}"]
        h = conv2d(h, layer, stride=2, padding=PAD)
        if layer.has_batch_norm:
            h = batch_norm(h, layer, mode, update_stats=update_stats)
        h = T.leaky_relu(h, LEAK)
        disc._record(f"conv{i}", h)
    b = h.shape[0]
    disc._record("features", T.flatten(h))
    proj = T.leaky_relu(dense(phi_t, disc.layers["cond"]), LEAK)
    grid = T.broadcast_to(proj.reshape(b, -1, 1, 1), (b, proj.shape[1], 4, 4))
    h = T.concat([h, grid], axis=1)
    red = disc.layers["reduce"]
    h = T.leaky_relu(batch_norm(conv2d(h, red), red, mode, update_stats=update_stats), LEAK)
    h = disc._record("reduced", T.flatten(h))
    logit = dense(h, disc.layers["head"])
    return T.sigmoid(logit).reshape(b)


# -- objectives ------------------------------------------------------------------


def _prob(p) -> Tensor:
    return T.clip(T.as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)


def d_loss(d_real, d_fake) -> Tensor:
    """Discriminator objective (to be maximized): E[log D(real)] + E[log(1 - D(fake))]."""
    return T.log(_prob(d_real)).mean() + T.log(1.0 - _prob(d_fake)).mean()


def g_loss(d_fake, kl_cond, lam: float = 1.0) -> Tensor:
    """Generator objective (to be minimized): E[log(1 - D(fake))] + lam * KL."""
    return T.log(1.0 - _prob(d_fake)).mean() + T.as_tensor(kl_cond) * lam


# -- training --------------------------------------------------------------------


def _check_finite(value: Tensor, model: Module, what: str) -> None:
    if not np.isfinite(value.data).all():
        where = model.first_nonfinite() or "loss"
        raise NonFiniteLossError(f"non-finite {what}; first non-finite output: {where}")


def discriminator_step(gen, disc, s0, c_hat, images, phi_t, state: AdamState, lr: float):
    """One ascent step on the discriminator objective; the generator is not touched."""
    with T.no_grad():
        fake = generate(gen, s0, c_hat, "train", update_stats=False)
    disc.trace = []
    try:
        loss = d_loss(disc(images, phi_t), disc(fake, phi_t))
        _check_finite(loss, disc, "discriminator loss")
    finally:
        disc.trace = None
    disc.zero_grad()
    (-loss).backward()
    adam_step(disc.named_parameters(), state, lr)
    return float(loss.data)


def generator_step(
    gen, disc, s0, c_hat, phi_t, kl_cond, state, lr, lam=1.0, objective="non_saturating"
):
    """One descent step for the generator with the discriminator frozen.

    The returned value is always :func:`g_loss`. With ``objective="saturating"``
    that same expression is differentiated; ``"non_saturating"`` descends
    ``-E[log D(fake)] + lam * KL`` instead, which shares its fixed point but
    keeps gradients alive while the discriminator rejects every sample.
    """
    if objective not in G_OBJECTIVES:
        raise ConfigurationError(f"unknown generator objective {objective!r}")
    disc.set_trainable(False)
    gen.trace = []
    try:
        fake = generate(gen, s0, c_hat, "train")
        d_fake = disc(fake, phi_t, "train", update_stats=False)
        loss = g_loss(d_fake, kl_cond, lam)
        _check_finite(loss, gen, "generator loss")
        if objective == "saturating":
            surrogate = loss
        else:
            surrogate = -T.log(_prob(d_fake)).mean() + T.as_tensor(kl_cond) * lam
        gen.zero_grad()
        surrogate.backward()
    finally:
        gen.trace = None
        disc.set_trainable(True)
    adam_step(gen.named_parameters(), state, lr)
    return float(loss.data)


def cgan_train_step(
    gen: Generator,
    disc: Discriminator,
    batch,
    stage1: CvaeModel,
    states,
    lr: float,
    rng: np.random.Generator,
    lam: float = 1.0,
    objective: str = "non_saturating",
):
    """Alternate one D step and one G step on a batch of ``(images, embeddings)``.

    Stage 1 is used read-only to draw the sketches and conditioning samples.
    ``states`` is ``(g_state, d_state)``. Returns ``(L_D, L_G)``.
    """
    g_state, d_state = states
    images, phi_t = disc.input(batch[0]), disc.input(batch[1])
    s0, c_hat, mu_c, lv_c = cvae_generate(stage1, phi_t, rng, return_condition=True)
    kl_cond = float(kl_to_standard_normal(mu_c, lv_c).data)
    loss_d = discriminator_step(gen, disc, s0, c_hat, images, phi_t, d_state, lr)
    loss_g = generator_step(gen, disc, s0, c_hat, phi_t, kl_cond, g_state, lr, lam, objective)
    return loss_d, loss_g


def sample_images(gen: Generator, stage1: CvaeModel, phi_t, rng: np.random.Generator) -> np.ndarray:
    """Full two-stage sampling in eval mode; returns (B, 3, 4S, 4S) in [-1, 1]."""
    s0, c_hat, _, _ = cvae_generate(stage1, phi_t, rng, return_condition=True)
    with T.no_grad():
        return generate(gen, s0, c_hat, "eval").data
