import numpy as np
import pytest

from spkadapt.exceptions import DataError, DegenerateDataError, DimensionMismatchError, EmptyComponentWarning, NoSpeechError
from spkadapt.features.frontend import FeatureMatrix
from spkadapt.models.gmm import (SPLIT_OFFSET, DiagonalGmm, VadModel, _em_step, accumulate_stats, classify_speech, fit_gmm,
                                 log_likelihood, posteriors, train_vad)


def _density(x, mean, var):
    return np.prod(np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var))

def test_single_component_is_sample_moments():
    frames = np.random.default_rng(0).normal(2.0, 3.0, size=(400, 3))
    g = fit_gmm(frames, 1, iterations=3)
    assert np.allclose(g.means[0], frames.mean(axis=0))
    assert np.allclose(g.variances[0], np.maximum(frames.var(axis=0), g.variance_floor))
    assert g.weights[0] == pytest.approx(1.0)

def test_two_symmetric_clusters():
    rng = np.random.default_rng(1)
    frames = np.concatenate([rng.normal(-5.0, 1.0, 1000), rng.normal(5.0, 1.0, 1000)])[:, None]
    g = fit_gmm(frames, 2, iterations=20)
    order = np.argsort(g.means[:, 0])
    assert np.allclose(g.means[order, 0], [-5.0, 5.0], atol=0.1)
    assert np.allclose(g.weights, 0.5, atol=0.05)

def test_em_log_likelihood_never_decreases():
    rng = np.random.default_rng(2)
    frames = np.vstack([rng.normal(center, 1.0, (200, 4)) for center in (-3.0, 0.0, 4.0)])
    g = fit_gmm(frames, 4, iterations=20)
    history = g.history
    assert history.size == 21
    assert np.all(np.diff(history) >= -1e-8 * np.abs(history[:-1]))

def test_fit_gmm_is_deterministic():
    frames = np.random.default_rng(3).standard_normal((300, 2))
    first = fit_gmm(frames, 4, iterations=5, seed=9)
    second = fit_gmm(frames, 4, iterations=5, seed=9)
    assert np.array_equal(first.means, second.means)
    assert np.array_equal(first.variances, second.variances)

def test_fit_gmm_errors():
    with pytest.raises(DegenerateDataError):
        fit_gmm(np.zeros((3, 2)), 4)

def test_empty_component_is_resplit():
    frames = np.random.default_rng(8).normal(0.0, 1.0, (200, 2))
    means = np.array([[0.0, 0.0], [1e4, 1e4]])
    with pytest.warns(EmptyComponentWarning):
        weights, new_means, variances, _ = _em_step(np.array([0.5, 0.5]), means, np.ones((2, 2)), frames, np.full(2, 1e-3))
    # the stranded component takes half of the updated heaviest one
    assert np.allclose(weights, [0.5, 0.5])
    assert np.allclose(variances[0], frames.var(axis=0))
    assert np.array_equal(variances[0], variances[1])
    assert np.allclose(new_means[0] - new_means[1], 2 * SPLIT_OFFSET * np.sqrt(variances[0]))
    assert np.allclose((new_means[0] + new_means[1]) / 2, frames.mean(axis=0))
    assert DiagonalGmm(weights, new_means, variances).num_components == 2

def test_single_component_log_likelihood_at_mean():
    var = np.array([0.5, 2.0, 3.0])
    g = DiagonalGmm([1.0], [[1.0, 2.0, 3.0]], [var])
    assert log_likelihood(g, [1.0, 2.0, 3.0]) == pytest.approx(np.sum(-0.5 * np.log(2 * np.pi * var)), abs=1e-12)

def test_two_component_log_likelihood_matches_summation():
    means = np.array([[0.0, 1.0], [2.0, -1.0]])
    variances = np.array([[1.0, 0.5], [2.0, 1.5]])
    g = DiagonalGmm([0.5, 0.5], means, variances)
    x = np.array([0.7, 0.2])
    p, q = _density(x, means[0], variances[0]), _density(x, means[1], variances[1])
    assert log_likelihood(g, x) == pytest.approx(np.log((p + q) / 2), abs=1e-12)

    swapped = DiagonalGmm([0.7, 0.3], means[::-1], variances[::-1])
    original = DiagonalGmm([0.3, 0.7], means, variances)
    assert log_likelihood(swapped, x) == pytest.approx(log_likelihood(original, x), abs=1e-12)

def test_posteriors():
    g = DiagonalGmm([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])
    assert np.allclose(posteriors(g, [0.0]), [0.5, 0.5], atol=1e-12)

    far = DiagonalGmm([0.5, 0.5], [[0.0], [20.0]], [[1.0], [1.0]])
    assert posteriors(far, [0.0])[0] > 1 - 1e-12

    rng = np.random.default_rng(4)
    weights = np.array([0.2, 0.5, 0.3])
    means = rng.standard_normal((3, 2))
    variances = rng.uniform(0.5, 2.0, (3, 2))
    g = DiagonalGmm(weights, means, variances)
    x = rng.standard_normal(2)
    dens = np.array([w * _density(x, m, v) for w, m, v in zip(weights, means, variances)])
    gamma = posteriors(g, x)
    assert np.allclose(gamma, dens / dens.sum(), atol=1e-12)
    assert abs(gamma.sum() - 1.0) <= 1e-12

    with pytest.raises(DimensionMismatchError):
        posteriors(g, [0.0, 1.0, 2.0])

def test_accumulate_stats():
    rng = np.random.default_rng(5)
    g = DiagonalGmm([0.4, 0.6], rng.standard_normal((2, 3)), np.ones((2, 3)))
    x = rng.standard_normal(3)
    single = accumulate_stats(g, FeatureMatrix("one", x[None, :]))
    gamma = posteriors(g, x)
    assert np.allclose(single.first_centered, gamma[:, None] * (x[None, :] - g.means))

    frames = rng.standard_normal((40, 3))
    mask = rng.random(40) < 0.6
    stats = accumulate_stats(g, FeatureMatrix("u", frames), mask)
    assert stats.frame_count == mask.sum()
    assert abs(stats.zeroth.sum() - mask.sum()) < 1e-6

    first = accumulate_stats(g, FeatureMatrix("a", frames[:25]))
    second = accumulate_stats(g, FeatureMatrix("b", frames[25:]))
    whole = accumulate_stats(g, FeatureMatrix("ab", frames))
    assert np.allclose(first.zeroth + second.zeroth, whole.zeroth)
    assert np.allclose(first.first_centered + second.first_centered, whole.first_centered)

    shuffled = accumulate_stats(g, FeatureMatrix("s", frames[rng.permutation(40)]))
    assert np.max(np.abs(shuffled.first_centered - whole.first_centered)) < 1e-9

    raw = accumulate_stats(g, frames)
    assert raw.utterance_id == "frames"
    assert np.allclose(raw.zeroth, whole.zeroth)
    assert np.allclose(raw.first_centered, whole.first_centered)

    with pytest.raises(NoSpeechError):
        accumulate_stats(g, FeatureMatrix("u", frames), np.zeros(40, dtype=bool))
    with pytest.raises(DimensionMismatchError):
        accumulate_stats(g, FeatureMatrix("u", frames), np.ones(10, dtype=bool))

def test_vad_separated_classes():
    rng = np.random.default_rng(6)
    speech = rng.normal(10.0, 1.0, (400, 2))
    nonspeech = rng.normal(0.0, 1.0, (400, 2))
    vad = train_vad(speech, nonspeech, components=2, iterations=5, prior_speech=0.5)
    flags = classify_speech(vad, FeatureMatrix("test", rng.normal(10.0, 1.0, (200, 2))))
    assert flags.mean() >= 0.9
    flags = classify_speech(vad, FeatureMatrix("test", rng.normal(0.0, 1.0, (200, 2))))
    assert flags.mean() <= 0.1

def test_vad_ties_go_to_speech():
    g = DiagonalGmm([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    vad = VadModel(g, g, 0.5)
    flags = classify_speech(vad, FeatureMatrix("tie", np.random.default_rng(7).standard_normal((30, 2))))
    assert flags.all()

def test_vad_needs_both_classes():
    with pytest.raises(DataError):
        train_vad(np.ones((10, 2)), np.zeros((0, 2)))
