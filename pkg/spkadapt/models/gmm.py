#   Copyright 2024 The spkadapt Authors
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from spkadapt.exceptions import (DataError, DegenerateDataError, DimensionMismatchError, EmptyComponentWarning,
                                 InvalidParameterError, NonFiniteDataError, NoSpeechError)
from spkadapt.features.frontend import FeatureMatrix
from spkadapt.models.model import Model, array_fingerprint

logger = logging.getLogger(__name__)

VARIANCE_FLOOR_SCALE = 1e-3
MIN_VARIANCE = 1e-10
SPLIT_OFFSET = 0.2
WARMUP_ITERATIONS = 2
WARMUP_MAX_FRAMES = 20000
# Frames scored per block, to bound the N x C x D temporary
SCORE_CHUNK = 1024
EMPTY_COUNT = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


class DiagonalGmm(Model):
    """
    A diagonal-covariance Gaussian mixture. Serves as the UBM and as each class of the VAD.

    Attributes:
        weights (numpy.ndarray): C mixture weights, summing to 1.
        means (numpy.ndarray): C x D component means.
        variances (numpy.ndarray): C x D diagonal variances, all positive.
        variance_floor (numpy.ndarray): D per-dimension floor applied during training.
        history (numpy.ndarray): Total data log-likelihood before training and after each EM pass.
    """

    kind = "GMM"

    def __init__(self, weights, means, variances, variance_floor=None, history=()):
        weights = np.asarray(weights, dtype=np.float64).ravel()
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
        if means.shape != variances.shape or means.shape[0] != weights.size:
            raise DimensionMismatchError(f"GMM shapes disagree: {weights.size} weights, means {means.shape}, variances {variances.shape}.")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise NonFiniteDataError("GMM parameters must be finite.")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-10:
            raise InvalidParameterError(f"GMM weights must be non-negative and sum to 1, got sum {weights.sum()!r}.")
        if np.any(variances <= 0):
            raise InvalidParameterError("GMM variances must be positive.")
        self.weights = weights
        self.means = means
        self.variances = variances
        self.variance_floor = np.zeros(means.shape[1]) if variance_floor is None else np.asarray(variance_floor, dtype=np.float64)
        self.history = np.asarray(history, dtype=np.float64)

    @property
    def num_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def fingerprint(self):
        """Content hash of the mixture parameters, used to check statistics against their UBM."""
        return array_fingerprint(self.weights, self.means, self.variances)

    def to_payload(self):
        arrays = {
            "weights": self.weights,
            "means": self.means,
            "variances": self.variances,
            "variance_floor": self.variance_floor,
            "history": self.history,
        }
        return {}, arrays

    @classmethod
    def from_payload(cls, meta, arrays):
        return cls(arrays["weights"], arrays["means"], arrays["variances"], arrays["variance_floor"], arrays["history"])


@dataclass(frozen=True, eq=False)
class BwStats:
    """Zeroth and centered first order Baum-Welch statistics of one utterance.

    Attributes:
        utterance_id (str)
        zeroth (numpy.ndarray): C soft counts N_c.
        first_centered (numpy.ndarray): C x D, F_c = sum_t gamma_t(c) (x_t - mu_c).
        frame_count (int): Frames that contributed.
        ubm_fingerprint (str): Fingerprint of the UBM the statistics came from; empty if unknown.
    """
    utterance_id: str
    zeroth: np.ndarray
    first_centered: np.ndarray
    frame_count: int
    ubm_fingerprint: str = ""

    def __post_init__(self):
        zeroth = np.asarray(self.zeroth, dtype=np.float64).ravel()
        first = np.atleast_2d(np.asarray(self.first_centered, dtype=np.float64))
        if first.shape[0] != zeroth.size:
            raise DimensionMismatchError(f"Statistics for '{self.utterance_id}' have {zeroth.size} counts but {first.shape[0]} first-order rows.")
        if np.any(zeroth < 0):
            raise DataError(f"Statistics for '{self.utterance_id}' have negative soft counts.")
        object.__setattr__(self, "zeroth", zeroth)
        object.__setattr__(self, "first_centered", first)

    @property
    def num_components(self):
        return self.zeroth.size

    @property
    def dim(self):
        return self.first_centered.shape[1]


def _as_frames(frames, dim=None):
    if isinstance(frames, FeatureMatrix):
        frames = frames.frames
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 1:
        frames = frames.reshape(1, -1)
    if frames.ndim != 2:
        raise DimensionMismatchError(f"Expected a matrix of frames, got {frames.ndim} dimensions.")
    if dim is not None and frames.shape[1] != dim:
        raise DimensionMismatchError(f"Frames have dimension {frames.shape[1]} but the GMM has dimension {dim}.")
    if not np.all(np.isfinite(frames)):
        raise NonFiniteDataError("Frames contain non-finite values.")
    return frames


def _component_log_densities(weights, means, variances, frames):
    """N x C matrix of log w_c + log N(x_t; mu_c, diag(var_c))."""
    log_norm = np.log(weights) - 0.5 * (means.shape[1] * LOG_2PI + np.log(variances).sum(axis=1))
    precisions = 1.0 / variances
    out = np.empty((frames.shape[0], weights.size))
    with np.errstate(divide="ignore"):
        for start in range(0, frames.shape[0], SCORE_CHUNK):
            block = frames[start:start + SCORE_CHUNK]
            diff = block[:, None, :] - means[None, :, :]
            out[start:start + SCORE_CHUNK] = log_norm - 0.5 * np.einsum("ncd,cd->nc", diff * diff, precisions)
    return out


def frame_log_likelihoods(g: DiagonalGmm, frames):
    """Per-frame mixture log-likelihoods, shape (N,)."""
    frames = _as_frames(frames, g.dim)
    return logsumexp(_component_log_densities(g.weights, g.means, g.variances, frames), axis=1)


def frame_posteriors(g: DiagonalGmm, frames):
    """Per-frame component responsibilities, shape (N, C); rows sum to 1."""
    frames = _as_frames(frames, g.dim)
    log_dens = _component_log_densities(g.weights, g.means, g.variances, frames)
    return np.exp(log_dens - logsumexp(log_dens, axis=1, keepdims=True))


def log_likelihood(g: DiagonalGmm, frame):
    """log sum_c w_c N(x; mu_c, var_c) of a single D-vector."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1:
        raise DimensionMismatchError(f"Expected a single frame vector, got shape {frame.shape}.")
    return float(frame_log_likelihoods(g, frame)[0])


def posteriors(g: DiagonalGmm, frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1:
        raise DimensionMismatchError(f"Expected a single frame vector, got shape {frame.shape}.")
    return frame_posteriors(g, frame)[0]


def _split(weights, means, variances, count):
    """Split the `count` heaviest components into two, offset by +/- SPLIT_OFFSET standard deviations."""
    order = np.argsort(-weights, kind="stable")[:count]
    offsets = SPLIT_OFFSET * np.sqrt(variances[order])
    means = means.copy()
    weights = weights.copy()
    weights[order] /= 2.0
    new_means = means[order] - offsets
    means[order] = means[order] + offsets
    return (np.concatenate([weights, weights[order]]),
            np.vstack([means, new_means]),
            np.vstack([variances, variances[order]]))


def _em_step(weights, means, variances, frames, floor):
    """One EM pass. Returns the updated parameters and the data log-likelihood under the old ones.

    A component that receives no frames is replaced by half of the heaviest updated component.
    """
    log_dens = _component_log_densities(weights, means, variances, frames)
    frame_ll = logsumexp(log_dens, axis=1)
    gamma = np.exp(log_dens - frame_ll[:, None])
    counts = gamma.sum(axis=0)
    empty = np.flatnonzero(counts < EMPTY_COUNT)
    safe_counts = np.maximum(counts, EMPTY_COUNT)

    new_weights = counts / counts.sum()
    new_means = (gamma.T @ frames) / safe_counts[:, None]
    new_variances = np.empty_like(new_means)
    for c in range(new_weights.size):
        centered = frames - new_means[c]
        new_variances[c] = (gamma[:, c] @ (centered * centered)) / safe_counts[c]
    new_variances = np.maximum(new_variances, floor)

    if empty.size:
        warnings.warn(f"{empty.size} GMM component(s) received no frames; re-splitting the heaviest component.", EmptyComponentWarning, stacklevel=3)
        for c in empty:
            heaviest = int(np.argmax(new_weights))
            offset = SPLIT_OFFSET * np.sqrt(new_variances[heaviest])
            new_means[c] = new_means[heaviest] - offset
            new_means[heaviest] = new_means[heaviest] + offset
            new_variances[c] = new_variances[heaviest]
            new_weights[c] = new_weights[heaviest] = new_weights[heaviest] / 2.0
        new_weights /= new_weights.sum()
    return new_weights, new_means, new_variances, frame_ll.sum()


def fit_gmm(frames, components, iterations=10, seed=0, verbose=False) -> DiagonalGmm:
    """Train a diagonal GMM with binary-split initialization and EM.

    Parameters:
    frames (array-like or FeatureMatrix): N x D training frames.
    components (int): Number of mixture components C.
    iterations (int): Full EM passes after the last split.
    seed (int): Picks the warm-up subsample when N is large.
    verbose (bool, optional): Show a progress bar over EM passes.

    Returns:
    DiagonalGmm: Its history holds the data log-likelihood before and after every EM pass. It is non-decreasing
        except after a pass that re-split an empty component (signalled by EmptyComponentWarning).
    """
    frames = _as_frames(frames)
    num_frames, dim = frames.shape
    if components < 1 or iterations < 1:
        raise InvalidParameterError(f"components and iterations must be at least 1, got {components} and {iterations}.")
    if num_frames < components:
        raise DegenerateDataError(f"Can't fit {components} components to {num_frames} frames.")

    global_var = frames.var(axis=0)
    floor = np.maximum(VARIANCE_FLOOR_SCALE * global_var, MIN_VARIANCE)
    weights = np.ones(1)
    means = frames.mean(axis=0, keepdims=True)
    variances = np.maximum(global_var, floor)[None, :]

    warmup = frames
    if num_frames > WARMUP_MAX_FRAMES:
        rng = np.random.default_rng(seed)
        warmup = frames[np.sort(rng.choice(num_frames, WARMUP_MAX_FRAMES, replace=False))]
    while weights.size < components:
        weights, means, variances = _split(weights, means, variances, min(weights.size, components - weights.size))
        for _ in range(WARMUP_ITERATIONS):
            weights, means, variances, _ = _em_step(weights, means, variances, warmup, floor)
        logger.debug("GMM split to %d components", weights.size)

    history = []
    for _ in tqdm(range(iterations), desc="EM", disable=not verbose):
        weights, means, variances, total_ll = _em_step(weights, means, variances, frames, floor)
        history.append(total_ll)
    history.append(logsumexp(_component_log_densities(weights, means, variances, frames), axis=1).sum())
    logger.info("Trained %d-component GMM on %d frames; log-likelihood %.4f -> %.4f", components, num_frames, history[0], history[-1])
    return DiagonalGmm(weights, means, variances, floor, history)


def accumulate_stats(g: DiagonalGmm, f: FeatureMatrix, mask=None) -> BwStats:
    """Baum-Welch statistics of an utterance over the frames selected by `mask`.

    Parameters:
    g (DiagonalGmm): The UBM.
    f (FeatureMatrix or array-like): Utterance features. A bare T x D array is treated as utterance "frames".
    mask (array-like of bool, optional): Per-frame speech flags. Default selects every frame.

    Returns:
    BwStats
    """
    if not isinstance(f, FeatureMatrix):
        f = FeatureMatrix("frames", _as_frames(f, g.dim))
    frames = _as_frames(f, g.dim)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.size != frames.shape[0]:
            raise DimensionMismatchError(f"'{f.utterance_id}' has {frames.shape[0]} frames but the mask has {mask.size} entries.")
        frames = frames[mask]
    if frames.shape[0] == 0:
        raise NoSpeechError(f"Utterance '{f.utterance_id}' has no speech frames.")
    gamma = frame_posteriors(g, frames)
    zeroth = gamma.sum(axis=0)
    first = gamma.T @ frames - zeroth[:, None] * g.means
    return BwStats(f.utterance_id, zeroth, first, frames.shape[0], g.fingerprint())


class VadModel(Model):
    """Two-class speech / non-speech GMM classifier.

    Attributes:
        speech (DiagonalGmm)
        nonspeech (DiagonalGmm)
        prior_speech (float): Prior probability of speech, in (0, 1).
    """

    kind = "VAD"

    def __init__(self, speech: DiagonalGmm, nonspeech: DiagonalGmm, prior_speech=0.5):
        if speech.dim != nonspeech.dim:
            raise DimensionMismatchError(f"Speech GMM has dimension {speech.dim}, non-speech GMM {nonspeech.dim}.")
        if not 0.0 < prior_speech < 1.0:
            raise InvalidParameterError(f"prior_speech must lie strictly between 0 and 1, got {prior_speech}.")
        self.speech = speech
        self.nonspeech = nonspeech
        self.prior_speech = float(prior_speech)

    @property
    def dim(self):
        return self.speech.dim

    def to_payload(self):
        arrays = {}
        for prefix, gmm in (("speech", self.speech), ("nonspeech", self.nonspeech)):
            _, member = gmm.to_payload()
            arrays.update({f"{prefix}/{name}": arr for name, arr in member.items()})
        return {"prior_speech": self.prior_speech}, arrays

    @classmethod
    def from_payload(cls, meta, arrays):
        speech = DiagonalGmm.from_payload({}, cls._nested_arrays("speech", arrays))
        nonspeech = DiagonalGmm.from_payload({}, cls._nested_arrays("nonspeech", arrays))
        return cls(speech, nonspeech, meta["prior_speech"])


def train_vad(speech_frames, nonspeech_frames, components=16, seed=0, iterations=10, prior_speech=None) -> VadModel:
    """Train the speech and non-speech GMMs of a VAD.

    Parameters:
    speech_frames, nonspeech_frames (array-like): Training frames of each class.
    components (int): Components per class; capped at the frame count of the class.
    seed (int)
    iterations (int)
    prior_speech (float, optional): Defaults to the share of speech frames in the training data.

    Returns:
    VadModel
    """
    speech_frames = _as_frames(speech_frames)
    nonspeech_frames = _as_frames(nonspeech_frames)
    if speech_frames.shape[0] == 0 or nonspeech_frames.shape[0] == 0:
        raise DataError("VAD training needs both speech and non-speech frames.")
    if prior_speech is None:
        prior_speech = speech_frames.shape[0] / (speech_frames.shape[0] + nonspeech_frames.shape[0])
    speech = fit_gmm(speech_frames, min(components, speech_frames.shape[0]), iterations, seed)
    nonspeech = fit_gmm(nonspeech_frames, min(components, nonspeech_frames.shape[0]), iterations, seed + 1)
    return VadModel(speech, nonspeech, prior_speech)


def classify_speech(v: VadModel, f: FeatureMatrix):
    """Per-frame speech flags; ties go to speech."""
    frames = _as_frames(f, v.dim)
    speech_score = frame_log_likelihoods(v.speech, frames) + np.log(v.prior_speech)
    nonspeech_score = frame_log_likelihoods(v.nonspeech, frames) + np.log1p(-v.prior_speech)
    return speech_score >= nonspeech_score
