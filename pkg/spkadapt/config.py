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

"""
Experiment configuration: an INI file of `key = value` lines under `[section]` headers.

Every key has a typed default in SCHEMA; unknown sections or keys are rejected. Values
from the file are overridden by command-line flags, and the merged result can be written
back out and re-run.
"""

import configparser
import io
import logging
import os

import numpy as np

from spkadapt.adapt.harness import AdaptationConfig, PartitionType
from spkadapt.adapt.pipeline import PipelineConfig
from spkadapt.corpus.generator import CorpusSpec, EnvironmentSpec
from spkadapt.exceptions import ConfigError, InvalidParameterError, MissingFileError
from spkadapt.features.frontend import Frontend, FrontendConfig
from spkadapt.features.transforms import UbmPathway
from spkadapt.models.acoustic import TrainConfig
from spkadapt.models.ivector import Normalization
from spkadapt.tools.file_tools import atomic_write

logger = logging.getLogger(__name__)

# Desk-scale defaults. Environments are name:matrix_scale:bias_scale with an optional :test suffix
# for test-only ones; grid_positions are ";"-separated row labels such as "1; all; (1,2)".
SCHEMA = {
    "run": {
        "seed": 0,
        "workers": 1,
        "verbose": False,
    },
    "corpus": {
        "num_speakers": 10,
        "utterances_per_speaker": 20,
        "min_frames": 60,
        "max_frames": 120,
        "num_classes": 12,
        "feature_dim": 40,
        "speaker_offset_scale": 1.0,
        "environments": "clean:0:0, channel_a:0.3:0.5, channel_b:0.3:0.5:test",
        "noise_sigma": 0.5,
        "silence_fraction": 0.2,
        "test_speakers": 4,
        "class_separation": 2.0,
        "min_run": 4,
        "max_run": 12,
    },
    "features": {
        "frontend": "gt",
        "sample_rate": 16000,
        "filter_count": 40,
        "cepstral_count": 13,
        "derivatives": 0,
        "context": 0,
        "lda_dim": 0,
    },
    "ubm": {
        "components": 64,
        "iterations": 8,
        "vad_components": 16,
        "vad_iterations": 8,
        "use_vad": True,
    },
    "ivector": {
        "rank": 10,
        "iterations": 5,
        "normalization": "sqrt",
        "grid_ranks": "5, 10, 20",
    },
    "acoustic": {
        "layer_sizes": "32, 32",
        "ivectors": True,
        "initial_lr": 0.002,
        "dropout_prob": 0.1,
        "l2_scale": 0.0001,
        "grad_noise_variance": 0.0001,
        "focal_gamma": 2.0,
        "lr_decay_factor": float(np.sqrt(2.0)),
        "pretrain": True,
        "max_epochs": 8,
        "optimizer": "nadam",
        "momentum": 0.9,
        "cv_fraction": 0.1,
    },
    "adapt": {
        "partition": "environment",
        "positions": "1",
        "lr": 0.01,
        "momentum": 0.9,
        "l2_to_identity": 0.01,
        "cv_fraction": 0.1,
        "max_epochs": 5,
        "activation": "identity",
        "data_loss_weight": 1.0,
        "grid_positions": "",
        "grid_partitions": "environment, speaker",
        "cascade": "",
    },
}

_TRUE = {"1", "yes", "true", "on"}
_FALSE = {"0", "no", "false", "off"}


def _coerce(section, key, value, default):
    """Convert a string to the type of the key's default."""
    if not isinstance(value, str):
        return type(default)(value)
    text = value.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {value!r} is not a valid {type(default).__name__}.") from None
    return text


def _csv(text):
    return [item.strip() for item in str(text).split(",") if item.strip()]


def parse_environments(text):
    """'clean:0:0, far:0.3:0.5:test' -> tuple of EnvironmentSpec."""
    environments = []
    for item in _csv(text):
        fields = [f.strip() for f in item.split(":")]
        if len(fields) not in (3, 4) or (len(fields) == 4 and fields[3] != "test"):
            raise ConfigError(f"Can't read environment '{item}'. Use name:matrix_scale:bias_scale[:test].")
        try:
            environments.append(EnvironmentSpec(fields[0], float(fields[1]), float(fields[2]), in_train=len(fields) == 3))
        except ValueError:
            raise ConfigError(f"Environment '{item}' has a non-numeric scale.") from None
    return tuple(environments)


class ExperimentConfig:
    """Typed experiment settings, section -> key -> value, plus builders for the library configs."""

    def __init__(self, values=None):
        self.values = {section: dict(keys) for section, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)

    @classmethod
    def from_file(cls, path):
        """Read an INI file over the defaults."""
        if not os.path.isfile(path):
            raise MissingFileError(f"Config file {path} does not exist.")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as in_file:
                parser.read_file(in_file)
        except configparser.Error as e:
            raise ConfigError(f"Can't parse config file {path}: {e}") from e
        return cls({section: dict(parser[section]) for section in parser.sections()})

    def set(self, section, key, value):
        """Set one value, checked against the schema."""
        if section not in SCHEMA:
            raise ConfigError(f"Unknown config section [{section}]. Known sections: {', '.join(SCHEMA)}.")
        if key not in SCHEMA[section]:
            raise ConfigError(f"Unknown key '{key}' in [{section}]. Known keys: {', '.join(SCHEMA[section])}.")
        self.values[section][key] = _coerce(section, key, value, SCHEMA[section][key])

    def get(self, section, key):
        return self.values[section][key]

    def override(self, overrides):
        """Apply {(section, key): value} pairs, skipping None values (flags not given)."""
        for (section, key), value in overrides.items():
            if value is not None:
                self.set(section, key, value)
        return self

    def to_text(self):
        """The merged config as INI text, in schema order."""
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            parser[section] = {key: str(value) for key, value in keys.items()}
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def write(self, path):
        with atomic_write(path, "w", encoding="utf-8") as out:
            out.write(self.to_text())
        return path

    # Builders

    @property
    def seed(self):
        return self.get("run", "seed")

    def corpus_spec(self):
        c = self.values["corpus"]
        try:
            return CorpusSpec(
                num_speakers=c["num_speakers"],
                utterances_per_speaker=c["utterances_per_speaker"],
                frames_per_utterance=(c["min_frames"], c["max_frames"]),
                num_classes=c["num_classes"],
                feature_dim=c["feature_dim"],
                speaker_offset_scale=c["speaker_offset_scale"],
                environments=parse_environments(c["environments"]),
                noise_sigma=c["noise_sigma"],
                silence_fraction=c["silence_fraction"],
                seed=self.seed,
                test_speakers=c["test_speakers"],
                class_separation=c["class_separation"],
                run_length=(c["min_run"], c["max_run"]),
            )
        except InvalidParameterError as e:
            raise ConfigError(f"[corpus] {e}") from e

    def frontend_config(self):
        f = self.values["features"]
        frontend = {"gt": Frontend.ERB_GT, "mfcc": Frontend.MEL_MFCC}.get(f["frontend"].lower())
        if frontend is None:
            raise ConfigError(f"[features] frontend must be gt or mfcc, got '{f['frontend']}'.")
        return FrontendConfig(sample_rate=f["sample_rate"], filter_count=f["filter_count"], frontend=frontend,
                              cepstral_count=f["cepstral_count"])

    def pathway(self):
        f = self.values["features"]
        try:
            return UbmPathway(self.frontend_config().frontend, f["derivatives"], f["context"], f["lda_dim"])
        except InvalidParameterError as e:
            raise ConfigError(f"[features] {e}") from e

    def normalization(self):
        try:
            return Normalization.parse(self.get("ivector", "normalization"))
        except InvalidParameterError as e:
            raise ConfigError(f"[ivector] {e}") from e

    def grid_ranks(self):
        try:
            return [int(rank) for rank in _csv(self.get("ivector", "grid_ranks"))]
        except ValueError:
            raise ConfigError("[ivector] grid_ranks must be a comma-separated list of integers.") from None

    def layer_sizes(self):
        try:
            return tuple(int(size) for size in _csv(self.get("acoustic", "layer_sizes")))
        except ValueError:
            raise ConfigError("[acoustic] layer_sizes must be a comma-separated list of integers.") from None

    def train_config(self):
        a = self.values["acoustic"]
        keys = ("initial_lr", "dropout_prob", "l2_scale", "grad_noise_variance", "focal_gamma", "lr_decay_factor",
                "pretrain", "max_epochs", "optimizer", "momentum")
        try:
            return TrainConfig(seed=self.seed, **{key: a[key] for key in keys})
        except InvalidParameterError as e:
            raise ConfigError(f"[acoustic] {e}") from e

    def adaptation_config(self, num_layers=None):
        a = self.values["adapt"]
        positions = a["positions"]
        if positions.strip() == "all":
            if num_layers is None:
                raise ConfigError("[adapt] positions = all needs the model's layer count.")
            positions = ",".join(str(p) for p in range(num_layers + 1))
        try:
            return AdaptationConfig(
                partition=PartitionType.parse(a["partition"]),
                positions=tuple(int(p) for p in _csv(positions.strip("()"))),
                lr=a["lr"],
                momentum=a["momentum"],
                l2_to_identity=a["l2_to_identity"],
                cv_fraction=a["cv_fraction"],
                seed=self.seed,
                max_epochs=a["max_epochs"],
                activation=a["activation"],
                data_loss_weight=a["data_loss_weight"],
                workers=self.get("run", "workers"),
            )
        except (InvalidParameterError, ValueError) as e:
            raise ConfigError(f"[adapt] {e}") from e

    def cascade(self):
        """'environment:0 > speaker:1' -> ((ENVIRONMENT, (0,)), (SPEAKER, (1,)))."""
        text = self.get("adapt", "cascade")
        if not text.strip():
            return ()
        stages = []
        for stage in text.split(">"):
            name, _, positions = stage.strip().partition(":")
            try:
                stages.append((PartitionType.parse(name), tuple(int(p) for p in positions.split("+"))))
            except (InvalidParameterError, ValueError):
                raise ConfigError(f"[adapt] Can't read cascade stage '{stage.strip()}'. Use partition:position[+position].") from None
        if len(stages) != 2:
            raise ConfigError("[adapt] cascade chains exactly two stages, e.g. 'environment:0 > speaker:1'.")
        return tuple(stages)

    def pipeline_config(self):
        u, i, a = self.values["ubm"], self.values["ivector"], self.values["acoustic"]
        try:
            return PipelineConfig(
                ubm_components=u["components"],
                ubm_iterations=u["iterations"],
                vad_components=u["vad_components"],
                vad_iterations=u["vad_iterations"],
                use_vad=u["use_vad"],
                ivector_rank=i["rank"],
                tv_iterations=i["iterations"],
                normalization=self.normalization(),
                layer_sizes=self.layer_sizes(),
                cv_fraction=a["cv_fraction"],
                train=self.train_config(),
                adaptation=self.adaptation_config(num_layers=len(self.layer_sizes())),
                position_labels=tuple(label.strip() for label in self.get("adapt", "grid_positions").split(";") if label.strip()),
                partitions=tuple(_csv(self.get("adapt", "grid_partitions"))),
                cascade=self.cascade(),
                workers=self.get("run", "workers"),
                seed=self.seed,
                verbose=self.get("run", "verbose"),
            )
        except InvalidParameterError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e
