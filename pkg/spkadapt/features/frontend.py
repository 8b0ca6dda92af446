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

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.io.wavfile
from numpy.lib.stride_tricks import sliding_window_view

from spkadapt.exceptions import DataError, InvalidParameterError, MissingFileError, NonFiniteDataError

# log(max(e, LOG_FLOOR)) keeps silence finite
LOG_FLOOR = 1e-10
GAMMATONE_ORDER = 4
PCM_SCALE = 32768.0


class FeatureKind(str, Enum):
    MFCC = "MFCC"
    GT = "GT"
    GT_DERIV = "GT_DERIV"
    GT_CONTEXT_LDA = "GT_CONTEXT_LDA"
    MFCC_DERIV = "MFCC_DERIV"
    MFCC_CONTEXT_LDA = "MFCC_CONTEXT_LDA"
    SYNTHETIC = "SYNTHETIC"


class Frontend(str, Enum):
    MEL_MFCC = "MEL_MFCC"
    ERB_GT = "ERB_GT"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """A T x D sequence of frame feature vectors (10 ms frames) for one utterance.

    The frames are stored as a read-only float64 copy, so a FeatureMatrix can be shared
    between threads without anyone changing it underneath the others.
    """
    utterance_id: str
    frames: np.ndarray
    feature_kind: FeatureKind = FeatureKind.SYNTHETIC

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise DataError(f"Features for '{self.utterance_id}' must be a T x D matrix, got shape {frames.shape}.")
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DataError(f"Features for '{self.utterance_id}' are empty (shape {frames.shape}).")
        if not np.all(np.isfinite(frames)):
            raise NonFiniteDataError(f"Features for '{self.utterance_id}' contain non-finite values.")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "feature_kind", FeatureKind(self.feature_kind))

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]

    def with_frames(self, frames, feature_kind=None):
        """Same utterance, new frame values."""
        return FeatureMatrix(self.utterance_id, frames, feature_kind or self.feature_kind)


@dataclass(frozen=True)
class FrontendConfig:
    """Framing and filterbank settings for compute_features.

    Attributes:
        sample_rate (int): Hz.
        frame_length (float): Analysis window in ms.
        frame_shift (float): Hop in ms.
        filter_count (int): Number of filters (the GT output dimension).
        frontend (Frontend): MEL_MFCC or ERB_GT.
        cepstral_count (int): Number of cepstra kept (MFCC only).
        low_freq (float): Lowest filter center / edge in Hz.
        high_freq (float): Highest filter center / edge in Hz; 0 means Nyquist.
    """
    sample_rate: int = 16000
    frame_length: float = 25.0
    frame_shift: float = 10.0
    filter_count: int = 40
    frontend: Frontend = Frontend.ERB_GT
    cepstral_count: int = 13
    low_freq: float = 50.0
    high_freq: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "frontend", Frontend(self.frontend))
        if self.sample_rate <= 0:
            raise InvalidParameterError(f"sample_rate must be positive, got {self.sample_rate}.")
        if self.frame_shift <= 0 or self.frame_length <= 0:
            raise InvalidParameterError("frame_length and frame_shift must be positive.")
        if self.frame_shift > self.frame_length:
            raise InvalidParameterError(f"frame_shift ({self.frame_shift} ms) can't exceed frame_length ({self.frame_length} ms).")
        if self.filter_count < 2:
            raise InvalidParameterError(f"filter_count must be at least 2, got {self.filter_count}.")
        if self.frontend == Frontend.MEL_MFCC and not 1 <= self.cepstral_count <= self.filter_count:
            raise InvalidParameterError(f"cepstral_count must be between 1 and filter_count ({self.filter_count}).")
        if not 0 <= self.low_freq < self.nyquist_limit:
            raise InvalidParameterError(f"low_freq must lie below {self.nyquist_limit} Hz.")

    @property
    def nyquist_limit(self):
        return self.high_freq if self.high_freq > 0 else self.sample_rate / 2.0

    @property
    def frame_samples(self):
        return int(round(self.sample_rate * self.frame_length / 1000.0))

    @property
    def shift_samples(self):
        return max(1, int(round(self.sample_rate * self.frame_shift / 1000.0)))

    @property
    def fft_size(self):
        return 1 << int(np.ceil(np.log2(self.frame_samples)))

    @property
    def output_dim(self):
        return self.filter_count if self.frontend == Frontend.ERB_GT else self.cepstral_count

    @property
    def feature_kind(self):
        return FeatureKind.GT if self.frontend == Frontend.ERB_GT else FeatureKind.MFCC


def erb_bandwidth(freq):
    """Equivalent rectangular bandwidth (Hz) of the auditory filter centered at freq."""
    return 24.7 * (4.37e-3 * np.asarray(freq, dtype=np.float64) + 1.0)


def _erb_rate(freq):
    return 21.4 * np.log10(1.0 + 4.37e-3 * np.asarray(freq, dtype=np.float64))


def _erb_rate_to_hz(rate):
    return (10.0 ** (np.asarray(rate) / 21.4) - 1.0) / 4.37e-3


def _hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def center_frequencies(config: FrontendConfig):
    """Filter center frequencies in Hz, ERB-spaced (GT) or mel-spaced (MFCC)."""
    if config.frontend == Frontend.ERB_GT:
        rates = np.linspace(_erb_rate(config.low_freq), _erb_rate(config.nyquist_limit), config.filter_count)
        return _erb_rate_to_hz(rates)
    mels = np.linspace(_hz_to_mel(config.low_freq), _hz_to_mel(config.nyquist_limit), config.filter_count + 2)
    return _mel_to_hz(mels[1:-1])


@lru_cache(maxsize=16)
def filterbank_weights(config: FrontendConfig):
    """Filter weights sampled on the rfft bins, shape (filter_count, fft_size // 2 + 1).

    GT filters use the magnitude response of a 4th-order gammatone filter,
    |H(f)| = (1 + ((f - fc) / b)^2)^(-order/2) with b = 1.019 * ERB(fc).
    MEL filters are the usual triangles between neighbouring mel points.
    """
    bins = np.arange(config.fft_size // 2 + 1) * config.sample_rate / config.fft_size
    if config.frontend == Frontend.ERB_GT:
        centers = center_frequencies(config)
        bandwidth = 1.019 * erb_bandwidth(centers)
        offset = (bins[None, :] - centers[:, None]) / bandwidth[:, None]
        weights = (1.0 + offset ** 2) ** (-GAMMATONE_ORDER / 2.0)
    else:
        mels = np.linspace(_hz_to_mel(config.low_freq), _hz_to_mel(config.nyquist_limit), config.filter_count + 2)
        edges = _mel_to_hz(mels)
        weights = np.zeros((config.filter_count, bins.size))
        for j in range(config.filter_count):
            left, center, right = edges[j], edges[j + 1], edges[j + 2]
            rising = (bins - left) / (center - left)
            falling = (right - bins) / (right - center)
            weights[j] = np.clip(np.minimum(rising, falling), 0.0, None)
    weights.setflags(write=False)
    return weights


def floor_vector(config: FrontendConfig):
    """The frame compute_features returns for an all-zero signal."""
    log_floor = np.full(config.filter_count, np.log(LOG_FLOOR))
    if config.frontend == Frontend.ERB_GT:
        return log_floor
    return scipy.fft.dct(log_floor, type=2, norm="ortho")[:config.cepstral_count]


def compute_features(audio, sample_rate, config: FrontendConfig = FrontendConfig(), utterance_id="utt"):
    """Turn a mono PCM signal into log filterbank (GT) or cepstral (MFCC) frames.

    Parameters:
    audio (array-like): Mono samples, float in [-1, 1) or int16 PCM.
    sample_rate (int): Sample rate of `audio`; must equal config.sample_rate.
    config (FrontendConfig): Framing and filterbank settings.
    utterance_id (str, optional): Id stamped on the returned FeatureMatrix.

    Returns:
    FeatureMatrix: T x filter_count (GT) or T x cepstral_count (MFCC), with
        T = floor((len - frame_length) / frame_shift) + 1.
    """
    samples = np.asarray(audio)
    if samples.ndim != 1:
        raise DataError(f"Audio for '{utterance_id}' must be mono (1-D), got shape {samples.shape}.")
    if np.issubdtype(samples.dtype, np.integer):
        samples = samples.astype(np.float64) / PCM_SCALE
    else:
        samples = samples.astype(np.float64)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteDataError(f"Audio for '{utterance_id}' contains non-finite samples.")
    if sample_rate != config.sample_rate:
        raise InvalidParameterError(f"Audio is sampled at {sample_rate} Hz but the frontend expects {config.sample_rate} Hz.")

    frame_len = config.frame_samples
    if samples.size < frame_len:
        raise DataError(f"Audio for '{utterance_id}' has {samples.size} samples, shorter than one {frame_len}-sample frame.")

    num_frames = (samples.size - frame_len) // config.shift_samples + 1
    frames = sliding_window_view(samples, frame_len)[::config.shift_samples][:num_frames]
    spectrum = np.abs(scipy.fft.rfft(frames * np.hamming(frame_len), n=config.fft_size, axis=1))

    weights = filterbank_weights(config)
    if config.frontend == Frontend.ERB_GT:
        feats = np.log(np.maximum(spectrum @ weights.T, LOG_FLOOR))
    else:
        log_mel = np.log(np.maximum((spectrum ** 2) @ weights.T, LOG_FLOOR))
        feats = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, :config.cepstral_count]
    return FeatureMatrix(utterance_id, feats, config.feature_kind)


def read_wav(path):
    """Read a mono 16-bit PCM WAV file.

    Returns:
    tuple: (samples as float64 in [-1, 1), sample rate in Hz)
    """
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise MissingFileError(f"WAV file {path} does not exist.") from None
    except ValueError as e:
        raise DataError(f"Could not read {path} as a WAV file: {e}") from e
    if data.dtype != np.int16:
        raise DataError(f"{path} holds {data.dtype} samples; only 16-bit PCM is supported.")
    if data.ndim != 1:
        raise DataError(f"{path} has {data.shape[1]} channels; only mono is supported.")
    return data.astype(np.float64) / PCM_SCALE, rate


def write_wav(path, samples, sample_rate):
    """Write float samples in [-1, 1) as mono 16-bit PCM, clipping anything outside."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1).astype(np.int16)
    scipy.io.wavfile.write(path, sample_rate, pcm)
    return path
