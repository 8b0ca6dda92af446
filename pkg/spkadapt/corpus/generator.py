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
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.signal

from spkadapt.corpus.manifest import COLUMNS, DatasetManifest, write_manifest
from spkadapt.exceptions import InvalidParameterError
from spkadapt.features.frontend import FeatureKind, FeatureMatrix, FrontendConfig, write_wav
from spkadapt.tools.archive_tools import write_archive

logger = logging.getLogger(__name__)

SILENCE_CLASS = 0
SPLITS = ("train", "test")


@dataclass(frozen=True)
class EnvironmentSpec:
    """A recording condition: frames become A x + b with A = I + matrix_scale * G / sqrt(D).

    Attributes:
        name (str)
        matrix_scale (float): 0 gives A = I.
        bias_scale (float): Standard deviation of the entries of b.
        in_train (bool): False keeps the environment out of the training split.
    """
    name: str
    matrix_scale: float = 0.0
    bias_scale: float = 0.0
    in_train: bool = True


@dataclass(frozen=True)
class CorpusSpec:
    """Everything generate() needs; generation is a pure function of this spec.

    Attributes:
        num_speakers (int): Training speakers.
        utterances_per_speaker (int)
        frames_per_utterance (tuple of int): Inclusive (min, max) utterance length in frames.
        num_classes (int): Target states, class 0 being silence.
        feature_dim (int)
        speaker_offset_scale (float): Standard deviation of each speaker's additive offset.
        environments (tuple of EnvironmentSpec)
        noise_sigma (float): Per-frame Gaussian noise.
        silence_fraction (float): Probability that a label run is silence.
        seed (int)
        test_speakers (int): Unseen speakers in the test split.
        class_separation (float): Standard deviation of the class means.
        run_length (tuple of int): Inclusive (min, max) label run length in frames.
    """
    num_speakers: int = 10
    utterances_per_speaker: int = 20
    frames_per_utterance: tuple = (60, 120)
    num_classes: int = 12
    feature_dim: int = 40
    speaker_offset_scale: float = 1.0
    environments: tuple = (EnvironmentSpec("clean"),)
    noise_sigma: float = 0.5
    silence_fraction: float = 0.2
    seed: int = 0
    test_speakers: int = 4
    class_separation: float = 2.0
    run_length: tuple = (4, 12)

    def __post_init__(self):
        counts = (self.num_speakers, self.utterances_per_speaker, self.num_classes, self.feature_dim, self.test_speakers)
        if min(counts) < 1:
            raise InvalidParameterError("Speaker, utterance, class, dimension and test speaker counts must all be at least 1.")
        if self.num_classes < 2:
            raise InvalidParameterError("A corpus needs a silence class plus at least one speech class.")
        low, high = self.frames_per_utterance
        if not 1 <= low <= high:
            raise InvalidParameterError(f"frames_per_utterance must be an increasing positive range, got {self.frames_per_utterance}.")
        if not 1 <= self.run_length[0] <= self.run_length[1]:
            raise InvalidParameterError(f"run_length must be an increasing positive range, got {self.run_length}.")
        if min(self.speaker_offset_scale, self.noise_sigma, self.class_separation) < 0:
            raise InvalidParameterError("Scales can't be negative.")
        if not 0.0 <= self.silence_fraction < 1.0:
            raise InvalidParameterError(f"silence_fraction must be in [0, 1), got {self.silence_fraction}.")
        if not self.environments:
            raise InvalidParameterError("A corpus needs at least one environment.")
        names = [env.name for env in self.environments]
        if len(set(names)) != len(names):
            raise InvalidParameterError(f"Environment names must be unique, got {names}.")
        if not any(env.in_train for env in self.environments):
            raise InvalidParameterError("At least one environment must be part of the training split.")
        for env in self.environments:
            if min(env.matrix_scale, env.bias_scale) < 0:
                raise InvalidParameterError(f"Environment '{env.name}' has a negative scale.")


@dataclass(frozen=True, eq=False)
class Utterance:
    utterance_id: str
    speaker_id: str
    environment_id: str
    features: FeatureMatrix
    labels: np.ndarray


@dataclass
class Corpus:
    """Generated train and test splits plus the hidden generating parameters."""
    spec: CorpusSpec
    train: list
    test: list
    class_means: np.ndarray
    speaker_offsets: dict
    channels: dict = field(default_factory=dict)

    def split(self, name):
        if name not in SPLITS:
            raise InvalidParameterError(f"Unknown split '{name}'. Use one of {SPLITS}.")
        return self.train if name == "train" else self.test

    def features(self, name):
        return {u.utterance_id: u.features for u in self.split(name)}

    def labels(self, name):
        return {u.utterance_id: u.labels for u in self.split(name)}

    def records(self, name):
        """The split as a manifest-shaped table (archive paths left empty)."""
        rows = {u.utterance_id: [u.speaker_id, u.environment_id, "", ""] for u in self.split(name)}
        records = pd.DataFrame.from_dict(rows, orient="index", columns=COLUMNS)
        records.index.name = "Utterance_ID"
        return records

    def write(self, out_dir):
        """Write archives and a manifest per split.

        Returns:
        dict: split name -> manifest path
        """
        os.makedirs(out_dir, exist_ok=True)
        manifests = {}
        for name in SPLITS:
            utterances = self.split(name)
            feature_path = os.path.abspath(os.path.join(out_dir, f"{name}_features.farc"))
            label_path = os.path.abspath(os.path.join(out_dir, f"{name}_labels.farc"))
            write_archive([(u.utterance_id, u.features.frames) for u in utterances], feature_path)
            write_archive([(u.utterance_id, u.labels.reshape(-1, 1)) for u in utterances], label_path)
            records = self.records(name)
            records["Feature_Path"] = feature_path
            records["Label_Path"] = label_path
            manifests[name] = write_manifest(DatasetManifest(records), os.path.join(out_dir, f"{name}.tsv"))
            logger.info("Wrote %d %s utterances to %s", len(utterances), name, out_dir)
        return manifests


def _label_runs(rng, num_frames, spec: CorpusSpec):
    labels = np.empty(num_frames, dtype=np.int64)
    position = 0
    while position < num_frames:
        length = int(rng.integers(spec.run_length[0], spec.run_length[1] + 1))
        if rng.random() < spec.silence_fraction:
            label = SILENCE_CLASS
        else:
            label = int(rng.integers(1, spec.num_classes))
        labels[position:position + length] = label
        position += length
    return labels


def _channel(rng, env: EnvironmentSpec, dim):
    matrix = np.eye(dim) + env.matrix_scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    bias = env.bias_scale * rng.standard_normal(dim)
    return matrix, bias


def generate(spec: CorpusSpec) -> Corpus:
    """Draw a synthetic corpus.

    Frame t of an utterance is A_env (mu_class(t) + o_speaker + eps) + b_env with eps ~ N(0, noise_sigma^2 I).
    Training speakers cycle over the training environments, unseen test speakers over all environments;
    every utterance of a speaker shares its environment.

    Returns:
    Corpus
    """
    rng = np.random.default_rng(spec.seed)
    dim = spec.feature_dim
    class_means = spec.class_separation * rng.standard_normal((spec.num_classes, dim))
    channels = {env.name: _channel(rng, env, dim) for env in spec.environments}
    train_envs = [env.name for env in spec.environments if env.in_train]
    all_envs = [env.name for env in spec.environments]

    offsets = {}
    splits = {"train": [], "test": []}
    speaker_plan = [("train", f"spk{s:03d}", train_envs[s % len(train_envs)]) for s in range(spec.num_speakers)]
    speaker_plan += [("test", f"spk{spec.num_speakers + s:03d}", all_envs[s % len(all_envs)]) for s in range(spec.test_speakers)]
    for split, speaker, env_name in speaker_plan:
        offsets[speaker] = spec.speaker_offset_scale * rng.standard_normal(dim)
        matrix, bias = channels[env_name]
        for u in range(spec.utterances_per_speaker):
            num_frames = int(rng.integers(spec.frames_per_utterance[0], spec.frames_per_utterance[1] + 1))
            labels = _label_runs(rng, num_frames, spec)
            clean = class_means[labels] + offsets[speaker] + spec.noise_sigma * rng.standard_normal((num_frames, dim))
            frames = clean @ matrix.T + bias
            utt_id = f"{speaker}-{env_name}-{u:03d}"
            splits[split].append(Utterance(utt_id, speaker, env_name, FeatureMatrix(utt_id, frames, FeatureKind.SYNTHETIC), labels))
    logger.info("Generated %d train and %d test utterances (seed %d)", len(splits["train"]), len(splits["test"]), spec.seed)
    return Corpus(spec, splits["train"], splits["test"], class_means, offsets, channels)


def render_audio(corpus: Corpus, out_dir, frontend: FrontendConfig = FrontendConfig(), split="train"):
    """Synthesize a 16-bit WAV per utterance whose spectrum follows the same hidden structure.

    Each speech class sounds as three sinusoidal formants; the speaker warps their frequencies,
    the environment colours the signal with a short FIR filter and adds noise. Silence is low-level noise.
    The sample count is chosen so compute_features(frontend) yields exactly one frame per label.

    Returns:
    pandas.DataFrame: Manifest-shaped records with Feature_Path pointing at the WAVs.
    """
    rng = np.random.default_rng(corpus.spec.seed + 1)
    nyquist = frontend.sample_rate / 2.0
    formants = rng.uniform(200.0, 0.8 * nyquist, size=(corpus.spec.num_classes, 3))
    warps = {speaker: 1.0 + 0.05 * np.tanh(offset[:1].sum()) for speaker, offset in corpus.speaker_offsets.items()}
    filters = {}
    for env in corpus.spec.environments:
        taps = np.zeros(8)
        taps[0] = 1.0
        taps += 0.3 * env.matrix_scale * rng.standard_normal(8)
        filters[env.name] = (taps, 0.01 + 0.05 * env.bias_scale)

    os.makedirs(out_dir, exist_ok=True)
    records = corpus.records(split)
    shift, frame_len = frontend.shift_samples, frontend.frame_samples
    for u in corpus.split(split):
        num_samples = (u.labels.size - 1) * shift + frame_len
        frame_of_sample = np.minimum(np.arange(num_samples) // shift, u.labels.size - 1)
        sample_labels = u.labels[frame_of_sample]
        signal = np.zeros(num_samples)
        for k in range(3):
            freq = formants[sample_labels, k] * warps[u.speaker_id]
            phase = 2.0 * np.pi * np.cumsum(freq) / frontend.sample_rate
            signal += np.where(sample_labels == SILENCE_CLASS, 0.0, 0.2 / (k + 1) * np.sin(phase))
        taps, noise_level = filters[u.environment_id]
        signal = scipy.signal.lfilter(taps, [1.0], signal) + noise_level * rng.standard_normal(num_samples)
        path = os.path.abspath(os.path.join(out_dir, f"{u.utterance_id}.wav"))
        write_wav(path, np.clip(signal, -1.0, 1.0), frontend.sample_rate)
        records.loc[u.utterance_id, "Feature_Path"] = path
    return records
