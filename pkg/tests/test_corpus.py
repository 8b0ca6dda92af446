import os

import numpy as np
import pytest

from spkadapt.adapt import DataSplit, PipelineConfig, ubm_feature_grid
from spkadapt.corpus import DatasetManifest, EnvironmentSpec, generate, load_manifest, render_audio
from spkadapt.exceptions import (DanglingReferenceError, DuplicateUtteranceError, InvalidParameterError,
                                 MalformedLineError, MissingFileError)
from spkadapt.features import Frontend, FrontendConfig, UbmPathway, compute_features, read_wav
from spkadapt.models.acoustic import TrainConfig

from .utils import SMALL_ENVIRONMENTS, small_spec


def test_generate_is_deterministic():
    first = generate(small_spec())
    second = generate(small_spec())
    for name in ("train", "test"):
        assert list(first.features(name)) == list(second.features(name))
        for utt, f in first.features(name).items():
            assert np.array_equal(f.frames, second.features(name)[utt].frames)
            assert np.array_equal(first.labels(name)[utt], second.labels(name)[utt])
    assert not np.array_equal(first.class_means, generate(small_spec(seed=8)).class_means)

def test_generated_splits():
    corpus = generate(small_spec())
    train, test = corpus.records("train"), corpus.records("test")
    assert len(train) == 16 and len(test) == 8
    assert set(train["Speaker_ID"]).isdisjoint(test["Speaker_ID"])
    assert train.index.name == "Utterance_ID"
    for records in (train, test):
        # a speaker never changes environment
        assert (records.groupby("Speaker_ID")["Environment_ID"].nunique() == 1).all()
    for utt in corpus.train:
        assert utt.features.num_frames == utt.labels.size
        assert 20 <= utt.labels.size <= 30
        assert utt.labels.min() >= 0 and utt.labels.max() < 4

def test_test_only_environment():
    environments = SMALL_ENVIRONMENTS + (EnvironmentSpec("street", 0.5, 1.0, in_train=False),)
    corpus = generate(small_spec(environments=environments, test_speakers=3))
    assert "street" not in set(corpus.records("train")["Environment_ID"])
    assert "street" in set(corpus.records("test")["Environment_ID"])

def test_corpus_spec_checks():
    with pytest.raises(InvalidParameterError):
        small_spec(num_classes=1)
    with pytest.raises(InvalidParameterError):
        small_spec(frames_per_utterance=(30, 20))
    with pytest.raises(InvalidParameterError):
        small_spec(environments=(EnvironmentSpec("lab", in_train=False),))
    with pytest.raises(InvalidParameterError):
        small_spec(environments=(EnvironmentSpec("lab"), EnvironmentSpec("lab")))

def test_write_then_load_manifest(tmp_path):
    corpus = generate(small_spec())
    manifests = corpus.write(str(tmp_path))
    assert set(manifests) == {"train", "test"}

    manifest = load_manifest(manifests["test"])
    assert manifest.utterance_ids == list(corpus.features("test"))
    assert list(manifest.records.columns) == ["Speaker_ID", "Environment_ID", "Feature_Path", "Label_Path"]
    assert manifest.environments() == dict(corpus.records("test")["Environment_ID"])

    features = manifest.load_features()
    labels = manifest.load_labels()
    for utt, f in corpus.features("test").items():
        # archives store single precision
        assert np.array_equal(features[utt].frames, f.frames.astype(np.float32).astype(np.float64))
        assert np.array_equal(labels[utt], corpus.labels("test")[utt])
    split = DataSplit.from_manifest(manifest)
    assert split.num_classes <= 4

def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as out:
        out.write("\n".join(lines) + "\n")
    return str(path)

def test_manifest_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_manifest(str(tmp_path / "absent.tsv"))

    malformed = _write_lines(tmp_path / "malformed.tsv", ["u1\tspk\tclean\tfeats.farc"])
    with pytest.raises(MalformedLineError) as info:
        load_manifest(malformed)
    assert "line 1" in str(info.value)

    blank_field = _write_lines(tmp_path / "blank.tsv", ["u1\tspk\t\tfeats.farc\tlabels.farc"])
    with pytest.raises(MalformedLineError):
        load_manifest(blank_field)

    duplicate = _write_lines(tmp_path / "duplicate.tsv", ["# comment", "u1\tspk\tclean\tf.farc\tl.farc", "u1\tspk\tclean\tf.farc\tl.farc"])
    with pytest.raises(DuplicateUtteranceError):
        load_manifest(duplicate, validate=False)

    dangling = _write_lines(tmp_path / "dangling.tsv", ["u1\tspk\tclean\tmissing.farc\tmissing.farc"])
    assert len(load_manifest(dangling, validate=False)) == 1
    with pytest.raises(DanglingReferenceError):
        load_manifest(dangling)

def test_manifest_id_must_be_in_archive(tmp_path):
    corpus = generate(small_spec())
    manifests = corpus.write(str(tmp_path))
    manifest = load_manifest(manifests["train"])
    records = manifest.records.copy()
    records.index = [utt + "-renamed" if i == 0 else utt for i, utt in enumerate(records.index)]
    with pytest.raises(DanglingReferenceError):
        DatasetManifest(records).validate()

def test_rendered_audio_has_one_frame_per_label(tmp_path):
    corpus = generate(small_spec(num_speakers=2, utterances_per_speaker=2))
    frontend = FrontendConfig(filter_count=8)
    records = render_audio(corpus, str(tmp_path), frontend, split="test")
    assert all(path.endswith(".wav") and os.path.isfile(path) for path in records["Feature_Path"])
    for utt in corpus.test:
        samples, rate = read_wav(records.loc[utt.utterance_id, "Feature_Path"])
        assert rate == frontend.sample_rate
        assert compute_features(samples, rate, frontend).num_frames == utt.labels.size

def _audio_manifest(corpus, split, out_dir, frontend):
    label_path = os.path.join(out_dir, f"{split}_labels.farc")
    records = render_audio(corpus, os.path.join(out_dir, "wav"), frontend, split)
    records["Label_Path"] = label_path
    return DatasetManifest(records)

def test_ubm_feature_grid(tmp_path):
    corpus = generate(small_spec())
    corpus.write(str(tmp_path))
    frontend = FrontendConfig(filter_count=8, cepstral_count=4)
    train_audio = _audio_manifest(corpus, "train", str(tmp_path), frontend)
    test_audio = _audio_manifest(corpus, "test", str(tmp_path), frontend).validate()
    config = PipelineConfig(ubm_components=2, ubm_iterations=2, vad_components=2, vad_iterations=2, ivector_rank=2,
                            tv_iterations=2, layer_sizes=(3, 3), train=TrainConfig(max_epochs=1))
    pathways = (UbmPathway(Frontend.ERB_GT), UbmPathway(Frontend.MEL_MFCC, derivatives=2))
    grid = ubm_feature_grid(train_audio, test_audio, config, frontend, pathways)
    assert list(grid.index) == ["---", "GT", "MFCC +derivatives"]
    assert grid.index.name == "UBM_Features"
    assert list(grid.columns) == ["channel", "clean", "Avg."]
    assert np.all((grid.to_numpy() >= 0.0) & (grid.to_numpy() <= 1.0))
