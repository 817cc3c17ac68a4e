import math
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from cvaegan.data import synthesize
from cvaegan.errors import ContractError, DimensionError, InsufficientDataError
from cvaegan.metrics import (
    FEATURE_DIM,
    Classifier,
    GaussianStats,
    MetricReport,
    evaluate,
    fid,
    fid_from_features,
    fit_gaussian,
    inception_score,
    matrix_sqrt_psd,
    sqrt_sym,
    train_classifier,
)


def test_is_examples():
    assert inception_score(np.full((30, 4), 0.25))[0] == pytest.approx(1.0, abs=1e-6)
    onehot = np.eye(3)[np.tile(np.arange(3), 10)]
    assert inception_score(onehot)[0] == pytest.approx(3.0, abs=1e-6)
    same = np.eye(3)[np.zeros(30, dtype=int)]
    assert inception_score(same)[0] == pytest.approx(1.0, abs=1e-6)


def test_is_needs_enough_rows():
    with pytest.raises(InsufficientDataError):
        inception_score(np.full((5, 3), 1 / 3))
    with pytest.raises(DimensionError):
        inception_score(np.ones(10))


@given(st.integers(0, 2**16), st.integers(2, 6))
def test_is_bounded_by_class_count(seed, c):
    logits = np.random.default_rng(seed).standard_normal((40, c)) * 3
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    mean, _ = inception_score(p)
    assert 1.0 - 1e-9 <= mean <= c + 1e-9


def test_fit_gaussian_examples():
    s = fit_gaussian([[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_array_equal(s.mean, [1.0, 0.0])
    np.testing.assert_array_equal(s.cov, [[2.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(fit_gaussian(np.ones((4, 3))).cov, 0.0)
    with pytest.raises(InsufficientDataError):
        fit_gaussian([[1.0, 2.0]])


def test_matrix_sqrt_examples():
    np.testing.assert_allclose(matrix_sqrt_psd(np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]),
                               atol=1e-12)
    r = matrix_sqrt_psd([[2.0, 1.0], [1.0, 2.0]])
    a, b = (math.sqrt(3) + 1) / 2, (math.sqrt(3) - 1) / 2
    np.testing.assert_allclose(r, [[a, b], [b, a]], atol=1e-12)
    np.testing.assert_allclose(r @ r, [[2, 1], [1, 2]], atol=1e-12)


def test_matrix_sqrt_rejects_asymmetric_and_negative():
    with pytest.raises(ContractError):
        matrix_sqrt_psd([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ContractError):
        matrix_sqrt_psd(np.diag([1.0, -0.1]))
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([1.0, -1e-12])), np.diag([1.0, 0.0]))


@given(st.integers(0, 2**16), st.integers(1, 8))
def test_matrix_sqrt_reconstructs_random_psd(seed, d):
    b = np.random.default_rng(seed).standard_normal((d, d))
    a = b @ b.T
    r = matrix_sqrt_psd(a)
    assert np.linalg.norm(r @ r - a) <= 1e-8 * max(np.linalg.norm(a), 1e-300)


@given(st.integers(0, 2**16))
def test_sqrt_sym_trace_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    b1, b2 = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    s1, s2 = b1 @ b1.T, b2 @ b2.T
    expected = np.trace(scipy.linalg.sqrtm(s1 @ s2)).real
    assert np.trace(sqrt_sym(s1, s2)) == pytest.approx(expected, rel=1e-7)


def test_fid_examples():
    s = GaussianStats(np.zeros(2), np.eye(2))
    assert fid(s, s) == pytest.approx(0.0, abs=1e-12)
    assert fid(GaussianStats(np.zeros(1), np.eye(1)),
               GaussianStats(np.ones(1), np.eye(1))) == pytest.approx(1.0, abs=1e-12)
    assert fid(s, GaussianStats(np.zeros(2), 4 * np.eye(2))) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(DimensionError):
        fid(s, GaussianStats(np.zeros(3), np.eye(3)))


@given(st.integers(0, 2**16))
def test_fid_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = fit_gaussian(rng.standard_normal((20, 3))), fit_gaussian(rng.standard_normal((20, 3)) + 1)
    assert fid(a, b) >= 0
    assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-8, abs=1e-10)
    assert fid(a, a) == pytest.approx(0.0, abs=1e-9)


def test_fid_matches_scipy_oracle(rng):
    x, y = rng.standard_normal((50, 5)), rng.standard_normal((50, 5)) * 1.5 + 0.3
    mx, my = x.mean(0), y.mean(0)
    cx, cy = np.cov(x, rowvar=False), np.cov(y, rowvar=False)
    expected = ((mx - my) ** 2).sum() + np.trace(cx + cy - 2 * scipy.linalg.sqrtm(cx @ cy).real)
    assert fid(fit_gaussian(x), fit_gaussian(y)) == pytest.approx(expected, rel=1e-8)


def test_self_fid_zero_with_regularization(rng):
    f = rng.standard_normal((20, FEATURE_DIM))
    assert fid_from_features(f, f) == pytest.approx(0.0, abs=1e-6)


@pytest.fixture(scope="module")
def small_classifier():
    images, _, labels, _ = synthesize(240, 16, seed=3, labels=np.arange(24))
    return train_classifier(images, labels, epochs=1, seed=0, num_classes=24)


def test_classifier_outputs(small_classifier):
    images, _, _, _ = synthesize(5, 16, seed=4)
    feats, logits = small_classifier.forward(images)
    assert feats.shape == (5, FEATURE_DIM) and logits.shape == (5, 24)
    np.testing.assert_allclose(small_classifier.predict_proba(images).sum(axis=1), 1.0)
    assert small_classifier.classifier_id.startswith("surrogate-cnn-")
    assert small_classifier.classifier_id == small_classifier.classifier_id


def test_evaluate_report(small_classifier):
    real, emb, _, _ = synthesize(30, 16, seed=5)
    small_classifier.accuracy = 0.5

    def sample_fn(e, rng):
        return np.tanh(rng.standard_normal((len(e), 3, 16, 16))).astype(np.float32)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = evaluate(sample_fn, real, emb, small_classifier, 20, seed=0)
    assert any("singular" in str(w.message) for w in caught)
    assert "unreliable" in report.warning and "1e-6" in report.warning
    assert report.inception_score_mean >= 1.0 and report.fid >= 0
    assert MetricReport.from_json(report.to_json()) == report
