import numpy as np

from spkadapt.adapt.pipeline import DataSplit
from spkadapt.corpus.generator import CorpusSpec, EnvironmentSpec, generate
from spkadapt.features.frontend import FeatureMatrix
from spkadapt.models.acoustic import build_model

SMALL_ENVIRONMENTS = (EnvironmentSpec("clean"), EnvironmentSpec("channel", 0.3, 0.5))


def small_spec(**overrides):
    """
    A corpus small enough to train on inside a unit test.

    Args:
    **overrides: Any CorpusSpec field.

    Returns:
    CorpusSpec
    """
    settings = dict(num_speakers=4, utterances_per_speaker=4, frames_per_utterance=(20, 30), num_classes=4,
                    feature_dim=6, environments=SMALL_ENVIRONMENTS, test_speakers=2, run_length=(3, 6), seed=7)
    settings.update(overrides)
    return CorpusSpec(**settings)


def small_splits(**overrides):
    """Train and test DataSplits of a small generated corpus."""
    corpus = generate(small_spec(**overrides))
    return DataSplit.from_corpus(corpus, "train"), DataSplit.from_corpus(corpus, "test")


def random_features(utterance_id="utt", num_frames=12, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureMatrix(utterance_id, rng.standard_normal((num_frames, dim)))


def small_model(input_dim=5, ivector_dim=0, layer_sizes=(3, 3), output_dim=4, seed=0):
    return build_model(input_dim, ivector_dim, list(layer_sizes), output_dim, seed)


def write_config(path, sections):
    """
    Write an INI experiment config.

    Args:
    path (str or pathlib.Path): Destination.
    sections (dict): section -> {key: value}.

    Returns:
    str: The path written.
    """
    lines = []
    for section, keys in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in keys.items())
        lines.append("")
    with open(path, "w", encoding="utf-8") as out:
        out.write("\n".join(lines))
    return str(path)


# Desk config small enough for the command-line tests
TINY_CONFIG = {
    "corpus": {"num_speakers": 2, "utterances_per_speaker": 3, "min_frames": 20, "max_frames": 30, "num_classes": 4,
               "feature_dim": 4, "environments": "clean:0:0, channel:0.3:0.5", "test_speakers": 2,
               "min_run": 3, "max_run": 6},
    "ubm": {"components": 4, "iterations": 2, "vad_components": 2, "vad_iterations": 2},
    "ivector": {"rank": 10, "iterations": 2},
    "acoustic": {"layer_sizes": "3, 3", "max_epochs": 1, "ivectors": "off"},
    "adapt": {"max_epochs": 1},
}
