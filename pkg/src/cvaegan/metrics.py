"""Inception Score, Frechet distance, and the surrogate classifier behind them.

The large pretrained classifier those metrics normally rely on is replaced
by a small conv net trained on the synthetic shapes; every report carries the
classifier's id so scores from different classifiers are never compared.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, InsufficientDataError
from .layers import LayerGeometry, Module, batch_norm, conv2d, dense, init_params
from .optim import AdamState, adam_step
from .data import batch_iterator

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
IS_SPLITS = 10
SYMMETRY_TOL = 1e-10
EIG_FLOOR = 1e-8
FEATURE_DIM = 128
MIN_ACCURACY = 0.90


# -- Inception Score ---------------------------------------------------------------


def inception_score(probs, n_splits: int = IS_SPLITS):
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) across splits."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DimensionError(f"inception_score expects an N x C matrix, got {probs.shape}")
    if len(probs) < n_splits:
        raise InsufficientDataError(f"need at least {n_splits} rows, got {len(probs)}")
    scores = []
    for part in np.array_split(probs, n_splits):
        p = np.maximum(part, PROB_FLOOR)
        marginal = np.maximum(part.mean(axis=0, keepdims=True), PROB_FLOOR)
        kl = (part * (np.log(p) - np.log(marginal))).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


# -- Frechet distance ----------------------------------------------------------------


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise InsufficientDataError(f"fit_gaussian needs at least 2 rows, got shape {x.shape}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (len(x) - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T))


def matrix_sqrt_psd(a) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues down to -1e-8 (relative to the largest) are treated as zero.
    """
    a = np.asarray(a, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ContractError("matrix_sqrt_psd: input is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    floor = -EIG_FLOOR * max(1.0, float(vals.max(initial=0.0)))
    if vals.min(initial=0.0) < floor:
        raise ContractError(f"matrix_sqrt_psd: eigenvalue {vals.min():.3e} is negative")
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root) @ vecs.T


def sqrt_sym(sigma1, sigma2) -> np.ndarray:
    """sqrt(S1^1/2 S2 S1^1/2): a real symmetric matrix with the trace of sqrt(S1 S2)."""
    r = matrix_sqrt_psd(sigma1)
    m = r @ np.asarray(sigma2, dtype=np.float64) @ r
    return matrix_sqrt_psd(0.5 * (m + m.T))


def fid(stats_real: GaussianStats, stats_fake: GaussianStats) -> float:
    mu1, mu2 = np.asarray(stats_real.mean), np.asarray(stats_fake.mean)
    s1, s2 = np.asarray(stats_real.cov), np.asarray(stats_fake.cov)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise DimensionError(f"fid: dimension mismatch {mu1.shape} vs {mu2.shape}")
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(sqrt_sym(s1, s2)))
    if value < -1e-6:
        logger.warning("fid: clamping negative value %.3e to 0", value)
    return max(value, 0.0)


# -- surrogate classifier --------------------------------------------------------------


class Classifier(Module):
    """Three 5x5 stride-2 convs, a 128-unit feature layer, and a softmax head."""

    def __init__(self, image_size: int, num_classes: int, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.dtype = np.dtype(dtype)
        self.image_size = image_size
        self.num_classes = num_classes
        self.accuracy: Optional[float] = None
        seeds = iter(np.random.SeedSequence(seed).spawn(8))
        chans = [3, 16, 32, 64]
        for i in range(3):
            self.layers[f"conv{i}"] = init_params(
                LayerGeometry("conv", chans[i], chans[i + 1], 5, batch_norm=True),
                np.random.default_rng(next(seeds)),
                dtype,
            )
        flat = 64 * (image_size // 8) ** 2
        self.layers["features"] = init_params(
            LayerGeometry("dense", flat, FEATURE_DIM), np.random.default_rng(next(seeds)), dtype
        )
        self.layers["head"] = init_params(
            LayerGeometry("dense", FEATURE_DIM, num_classes), np.random.default_rng(next(seeds)), dtype
        )

    def forward(self, images, mode: str = "eval"):
        """Return ``(features, logits)``; features are the pre-activation 128-d layer."""
        h = self.input(images)
        for i in range(3):
            layer = self.layers[f"conv{i}"]
            h = T.relu(batch_norm(conv2d(h, layer, 2, 2), layer, mode))
        feats = dense(T.flatten(h), self.layers["features"])
        logits = dense(T.relu(feats), self.layers["head"])
        return feats, logits

    def _batched(self, images, batch_size=128):
        feats, probs = [], []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                f, logits = self.forward(images[start : start + batch_size], "eval")
                feats.append(f.data.astype(np.float64))
                probs.append(T.softmax(logits, axis=1).data.astype(np.float64))
        return np.concatenate(feats), np.concatenate(probs)

    def features(self, images) -> np.ndarray:
        return self._batched(images)[0]

    def predict_proba(self, images) -> np.ndarray:
        return self._batched(images)[1]

    @property
    def classifier_id(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return f"surrogate-cnn-{h.hexdigest()[:12]}"


def train_classifier(
    images, labels, epochs: int = 10, seed: int = 0, num_classes: Optional[int] = None, lr=1e-3,
    batch_size: int = 64,
) -> Classifier:
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = num_classes or int(labels.max()) + 1
    model = Classifier(images.shape[-1], num_classes, seed)
    state = AdamState()
    for epoch in range(epochs):
        for idx in batch_iterator(len(images), batch_size, seed, epoch):
            _, logits = model.forward(images[idx], "train")
            logp = T.log_softmax(logits, axis=1)
            onehot = np.zeros(logits.shape, dtype=np.float32)
            onehot[np.arange(len(idx)), labels[idx]] = 1.0
            loss = -(logp * onehot).sum(axis=1).mean()
            model.zero_grad()
            loss.backward()
            adam_step(model.named_parameters(), state, lr)
    return model


def classifier_accuracy(model: Classifier, images, labels) -> float:
    pred = model.predict_proba(images).argmax(axis=1)
    model.accuracy = float((pred == np.asarray(labels)).mean())
    return model.accuracy


# -- reports ----------------------------------------------------------------------------


@dataclass
class MetricReport:
    inception_score_mean: float
    inception_score_std: float
    fid: float
    n_samples: int
    classifier_id: str
    warning: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def feature_stats(features, regularize: bool = False) -> GaussianStats:
    stats = fit_gaussian(features)
    if regularize:
        stats.cov = stats.cov + 1e-6 * np.eye(len(stats.cov))
    return stats


def fid_from_features(real_feats, fake_feats) -> float:
    n = min(len(real_feats), len(fake_feats))
    regularize = n < real_feats.shape[1] + 1
    return fid(feature_stats(real_feats, regularize), feature_stats(fake_feats, regularize))


def evaluate(sample_fn, real_images, embeddings, classifier: Classifier, n_samples: int, seed=0):
    """Score ``n_samples`` generated images against ``real_images``.

    ``sample_fn(embeddings, rng)`` maps a batch of embeddings to images in
    [-1, 1]; embeddings are drawn cyclically from the given (test-split) table.
    """
    notes = []
    if classifier.accuracy is not None and classifier.accuracy < MIN_ACCURACY:
        notes.append(
            f"classifier accuracy {classifier.accuracy:.3f} < {MIN_ACCURACY}: metrics unreliable"
        )
    if n_samples < FEATURE_DIM + 1:
        msg = f"n_samples {n_samples} < feature dim + 1: covariance singular, adding 1e-6*I"
        warnings.warn(msg)
        notes.append(msg)
    rng = np.random.default_rng(seed)
    idx = np.arange(n_samples) % len(embeddings)
    fake = []
    for start in range(0, n_samples, 64):
        fake.append(sample_fn(embeddings[idx[start : start + 64]], rng))
    fake = np.concatenate(fake)
    fake_feats, fake_probs = classifier._batched(fake)
    real_feats = classifier.features(real_images)
    is_mean, is_std = inception_score(fake_probs, min(IS_SPLITS, n_samples))
    score = fid_from_features(real_feats, fake_feats)
    return MetricReport(is_mean, is_std, score, n_samples, classifier.classifier_id, "; ".join(notes))
