"""Finite-difference gradient checks for every differentiable op and both models.

Each case is a scalar function of named float64 inputs. The analytic gradient
from the tape is compared against central differences at a sample of
coordinates per input.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .cond_aug import init_cond_aug, kl_to_standard_normal, sample_condition, embed_to_gaussian
from .layers import LayerGeometry, batch_norm, conv2d, conv_transpose2d, dense, init_params
from .stage1 import CvaeConfig, CvaeModel, cvae_forward, cvae_loss
from .stage2 import Discriminator, GanConfig, Generator, d_loss, discriminate, g_loss, generate

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
# denominators below this are treated as this, so near-zero gradients compare absolutely
DENOM_FLOOR = 1e-6
# full models have thousands of ReLU units, so a smaller step keeps the difference
# quotient on one linear piece; the discriminator's first conv feeds leaky ReLU
# without batch norm and needs the smallest step
CASE_STEPS = {"cvae": 1e-6, "generator": 1e-6, "discriminator": 1e-7}
# one-sided quotients differing by more than this (relative) mean a kink lies in the step
KINK_GAP = 1e-3
MODEL_CASES = ("cvae", "generator", "discriminator")
DESK_CVAE = CvaeConfig(image_size=16, embedding_dim=64, base_channels=32)
DESK_GAN = GanConfig(stage1_size=16, embedding_dim=64, g_base=16, g_cond_channels=32,
                     d_cond_channels=32)


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    n_coords: int
    seconds: float
    n_kinks: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


def roundoff_bound(value: float, step: float, noise: float = 0.0) -> float:
    """Rounding error bound of a central difference of a float64 function.

    ``noise`` is the measured noise level of the function; long reductions can
    round well beyond one ulp of the result.
    """
    return 4 * max(np.finfo(np.float64).eps * max(abs(value), 1.0), noise) / step


def noise_level(fn: Callable, tensors: dict, order: int = 6, rel: float = 1e-9, seed: int = 0) -> float:
    """Standard deviation of the rounding noise in ``fn`` near its inputs.

    Samples ``fn`` at ``order + 2`` tiny equally spaced steps along a random
    direction. The smooth part vanishes from the ``order``-th differences, which
    leaves the noise (the ECnoise estimator of More and Wild).
    """
    rng = np.random.default_rng(seed)
    base = {k: t.data.copy() for k, t in tensors.items()}
    dirs = {k: rng.standard_normal(v.shape) * np.maximum(np.abs(v), 1.0) * rel for k, v in base.items()}
    values = []
    with T.no_grad():
        for i in range(order + 2):
            for k, t in tensors.items():
                t.data[...] = base[k] + i * dirs[k]
            values.append(float(fn(**tensors).data))
    for k, t in tensors.items():
        t.data[...] = base[k]
    gamma = math.factorial(order) ** 2 / math.factorial(2 * order)
    return math.sqrt(gamma * float(np.mean(np.diff(values, n=order) ** 2)))


def relative_error(analytic, numeric, floor: float = DENOM_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(
    fn: Callable, inputs: dict, rng: np.random.Generator, max_coords: int = 12, step: float = STEP
):
    """Compare tape gradients of ``fn(**tensors)`` with central differences.

    ``inputs`` maps names to float64 arrays; params live in the arrays so the
    perturbation is visible to ``fn``. Returns (max relative error, coords
    checked, coords where a kink fell inside the step).

    Gradients smaller than what the difference quotient can resolve to
    ``TOLERANCE`` (rounding bound / TOLERANCE, with the function's measured
    noise level) are compared at that resolution,
    which matters for exact zeros such as a bias feeding batch norm.

    A ReLU kink inside [x - step, x + step] makes the two one-sided quotients
    disagree far beyond smooth curvature; the analytic gradient is then the
    derivative of one linear piece, so it is compared with the closer
    one-sided quotient.
    """
    tensors = {k: T.Tensor(v, requires_grad=True) for k, v in inputs.items()}
    out = fn(**tensors)
    out.backward()
    f0 = float(out.data)
    floor = max(DENOM_FLOOR, roundoff_bound(f0, step, noise_level(fn, tensors)) / TOLERANCE)
    worst, count, kinks = 0.0, 0, 0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        grad = grad.reshape(-1)
        k = min(max_coords, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            with T.no_grad():
                flat[i] = orig + step
                plus = float(fn(**tensors).data)
                flat[i] = orig - step
                minus = float(fn(**tensors).data)
            flat[i] = orig
            err = float(relative_error(grad[i], (plus - minus) / (2 * step), floor))
            forward, backward = (plus - f0) / step, (f0 - minus) / step
            if err >= TOLERANCE and relative_error(forward, backward, 2 * floor) > KINK_GAP:
                kinks += 1
                err = float(min(relative_error(grad[i], q, 2 * floor) for q in (forward, backward)))
            worst = max(worst, err)
            count += 1
    return worst, count, kinks


def _projection(rng, shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _layer_case(geometry, forward, x_shape, rng):
    params = init_params(geometry, rng, np.float64)
    params.weight.data = rng.standard_normal(params.weight.shape) * 0.3
    live = [k for k in ("weight", "bias", "gamma", "beta") if getattr(params, k) is not None]
    x = rng.standard_normal(x_shape)
    with T.no_grad():
        proj = _projection(rng, forward(T.Tensor(x), params).shape)

    def fn(x, **p):
        for k, v in p.items():
            setattr(params, k, v)
        return (forward(x, params) * proj).sum()

    inputs = {"x": x}
    inputs.update({k: getattr(params, k).data.copy() for k in live})
    return fn, inputs


def op_cases(rng):
    """(name, fn, inputs) for each primitive op."""
    cases = []

    def unary(name, op, x):
        r = _projection(rng, op(T.Tensor(x)).shape)
        cases.append((name, lambda a: (op(a) * r).sum(), {"a": x}))

    def binary(name, op, x, y):
        r = _projection(rng, op(T.Tensor(x), T.Tensor(y)).shape)
        cases.append((name, lambda a, b: (op(a, b) * r).sum(), {"a": x, "b": y}))

    x = rng.standard_normal((3, 4))
    binary("add", T.add, x, rng.standard_normal((1, 4)))
    binary("sub", T.sub, x, rng.standard_normal((3, 1)))
    binary("mul", T.mul, x, rng.standard_normal((3, 4)))
    binary("div", T.div, x, rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    binary("matmul", T.matmul, x, rng.standard_normal((4, 5)))
    unary("power", lambda a: T.power(a, 3.0), x)
    unary("square", T.square, x)
    unary("exp", T.exp, x)
    unary("expm1", T.expm1, x)
    unary("log", T.log, rng.uniform(0.5, 3.0, (3, 4)))
    unary("clip", lambda a: T.clip(a, -0.5, 0.5), _away_from_zero(rng, (3, 4)) + 0.0)
    unary("relu", T.relu, _away_from_zero(rng, (3, 4)))
    unary("leaky_relu", lambda a: T.leaky_relu(a, 0.2), _away_from_zero(rng, (3, 4)))
    unary("tanh", T.tanh, x)
    unary("sigmoid", T.sigmoid, rng.standard_normal((3, 4)) * 4)
    unary("softmax", lambda a: T.softmax(a, axis=1), x)
    unary("log_softmax", lambda a: T.log_softmax(a, axis=1), x)
    unary("sum", lambda a: T.tsum(a, axis=0, keepdims=True), x)
    unary("mean", lambda a: T.mean(a, axis=1), x)
    unary("reshape", lambda a: T.reshape(a, (2, 6)), x)
    unary("flatten", T.flatten, rng.standard_normal((2, 3, 2)))
    unary("transpose", lambda a: T.transpose(a, (1, 0)), x)
    unary("broadcast_to", lambda a: T.broadcast_to(a, (3, 3, 4)), x)
    unary("getitem", lambda a: T.getitem(a, (np.array([0, 2, 0]), slice(1, 3))), x)
    binary("concat", lambda a, b: T.concat([a, b], axis=1), x, rng.standard_normal((3, 2)))

    def layer(name, geometry, forward, x_shape):
        fn, inputs = _layer_case(geometry, forward, x_shape, rng)
        cases.append((name, fn, inputs))

    layer("dense", LayerGeometry("dense", 5, 3), dense, (4, 5))
    layer("conv2d", LayerGeometry("conv", 2, 3, 5), lambda x, p: conv2d(x, p, 2, 2), (2, 2, 7, 7))
    layer("conv2d_3x3", LayerGeometry("conv", 3, 2, 3), lambda x, p: conv2d(x, p, 1, 1),
          (2, 3, 5, 5))
    layer("conv_transpose2d", LayerGeometry("conv_t", 3, 2, 5),
          lambda x, p: conv_transpose2d(x, p, 2, 2, 1), (2, 3, 4, 4))
    layer("batch_norm_4d", LayerGeometry("conv", 2, 3, 3, batch_norm=True),
          lambda x, p: batch_norm(conv2d(x, p, 1, 1), p, "train"), (3, 2, 4, 4))
    layer("batch_norm_2d", LayerGeometry("dense", 4, 3, batch_norm=True),
          lambda x, p: batch_norm(dense(x, p), p, "train"), (5, 4))

    # conditioning augmentation: sample and KL with a fixed noise draw
    ca = init_cond_aug(6, 4, rng, np.float64)
    eps = rng.standard_normal((3, 4))
    r = _projection(rng, (3, 4))

    def cond_aug(phi, weight, bias):
        ca.weight, ca.bias = weight, bias
        mu, lv = embed_to_gaussian(phi, ca)
        return (sample_condition(mu, lv, eps) * r).sum() + kl_to_standard_normal(mu, lv)

    cases.append(("cond_aug", cond_aug, {"phi": rng.standard_normal((3, 6)),
                                         "weight": ca.weight.data.copy() * 10,
                                         "bias": ca.bias.data.copy()}))

    def vae_loss(x, x_hat, mu, lv):
        return cvae_loss(x, x_hat, mu, lv)[2]

    cases.append(("cvae_loss", vae_loss, {"x": rng.standard_normal((2, 3, 4, 4)),
                                          "x_hat": rng.standard_normal((2, 3, 4, 4)),
                                          "mu": rng.standard_normal((2, 5)),
                                          "lv": rng.standard_normal((2, 5)) * 0.5}))

    def gan_losses(real, fake):
        return -d_loss(real, fake) + g_loss(fake, 0.3)

    cases.append(("gan_losses", gan_losses, {"real": rng.uniform(0.1, 0.9, 6),
                                             "fake": rng.uniform(0.1, 0.9, 6)}))
    return cases


def _model_case(name, model, forward):
    """Bind the model's parameters to the checker's input tensors."""
    params = model.named_parameters()

    def fn(**inputs):
        for key, t in inputs.items():
            if key in params:
                layer, attr = key.rsplit(".", 1)
                setattr(model.layers[layer], attr, t)
        return forward(**{k: v for k, v in inputs.items() if k not in params})

    return name, fn, params


def model_cases(seed: int, batch: int = 4):
    rng = np.random.default_rng([seed, 7])
    cases = []

    cvae = CvaeModel(DESK_CVAE, seed=seed, dtype=np.float64)
    images = np.tanh(rng.standard_normal((batch, 3, 16, 16)))
    emb = rng.standard_normal((batch, DESK_CVAE.embedding_dim))

    def cvae_fn(images):
        return cvae_forward(cvae, images, emb, np.random.default_rng(seed), 1.0)["total"]

    name, fn, params = _model_case("cvae", cvae, cvae_fn)
    cases.append((name, fn, {"images": images, **{k: p.data.copy() for k, p in params.items()}}))

    gen = Generator(DESK_GAN, seed=seed, dtype=np.float64)
    c_hat = rng.standard_normal((batch, DESK_GAN.cond_dim))
    size = DESK_GAN.output_size
    proj = rng.standard_normal((batch, 3, size, size)) / size

    def gen_fn(s0):
        return (generate(gen, s0, c_hat, "train") * proj).sum()

    name, fn, params = _model_case("generator", gen, gen_fn)
    s0 = np.tanh(rng.standard_normal((batch, 3, 16, 16)))
    cases.append((name, fn, {"s0": s0, **{k: p.data.copy() for k, p in params.items()}}))

    disc = Discriminator(DESK_GAN, seed=seed, dtype=np.float64)
    fake = np.tanh(rng.standard_normal((batch, 3, size, size)))
    phi = rng.standard_normal((batch, DESK_GAN.embedding_dim))

    def disc_fn(real):
        return -d_loss(discriminate(disc, real, phi), discriminate(disc, fake, phi))

    name, fn, params = _model_case("discriminator", disc, disc_fn)
    real = np.tanh(rng.standard_normal((batch, 3, size, size)))
    cases.append((name, fn, {"real": real, **{k: p.data.copy() for k, p in params.items()}}))
    return cases


def run_suite(seeds=range(5), include_models: bool = True, max_coords: int = 6):
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = op_cases(rng)
        if include_models:
            cases += model_cases(seed)
        for name, fn, inputs in cases:
            start = time.perf_counter()
            coords = max_coords if name in MODEL_CASES else 12
            step = CASE_STEPS.get(name, STEP)
            err, n, kinks = check_gradients(
                fn, inputs, np.random.default_rng([seed, 1]), coords, step
            )
            results.append(CheckResult(name, seed, err, n, time.perf_counter() - start, kinks))
    return results


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        lines.append(f"{status} {r.name:<18} seed={r.seed} max_rel_err={r.max_rel_error:.2e} "
                     f"coords={r.n_coords} kinks={r.n_kinks}")
    return "\n".join(lines)
