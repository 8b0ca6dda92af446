import copy
import dataclasses

import numpy as np
import pandas as pd
import pytest

from spkadapt.adapt import (AdaptationConfig, DataSplit, PartitionSet, PartitionType, PipelineConfig, adapt_all,
                            adapt_partition, adaptation_grid, cumulative_pipeline, evaluate, first_pass_targets,
                            frame_error_report, ivector_norm_grid, parse_positions, slot_key, split_train_cv)
from spkadapt.adapt.pipeline import pipeline_stage, position_label, train_acoustic
from spkadapt.config import ExperimentConfig
from spkadapt.corpus import generate
from spkadapt.exceptions import (AdaptationError, DataError, InvalidParameterError, MissingSlotError,
                                 NoCrossValidationWarning, PipelineStageError, UncoveredPartitionError)
from spkadapt.models.acoustic import TrainConfig, forward, insert_affine
from spkadapt.utils import relative_reduction

from .utils import small_model, small_splits


@pytest.fixture(scope="module")
def splits():
    return small_splits()

@pytest.fixture
def model():
    return small_model(input_dim=6, layer_sizes=(3, 3), output_dim=4, seed=11)

def _environment_set(test):
    return PartitionSet.from_records(test.records, PartitionType.ENVIRONMENT)

@pytest.mark.parametrize("count, cv_count", [(10, 1), (20, 2), (2, 1), (3, 1)])
def test_split_train_cv_sizes(count, cv_count):
    utterances = [f"u{i:02d}" for i in range(count)]
    train, cv = split_train_cv(utterances, 0.1, seed=4)
    assert len(cv) == cv_count
    assert len(train) == count - cv_count
    assert sorted(train + cv) == utterances
    # each list keeps input order
    assert train == sorted(train) and cv == sorted(cv)
    assert (train, cv) == split_train_cv(utterances, 0.1, seed=4)

def test_split_single_utterance_warns():
    with pytest.warns(NoCrossValidationWarning):
        train, cv = split_train_cv(["only"], 0.1, seed=0)
    assert (train, cv) == (["only"], [])

def test_partition_set(splits):
    _, test = splits
    environments = _environment_set(test)
    assert environments.keys() == ["channel", "clean"]
    assert all(utt.split("-")[1] == "clean" for utt in environments.members("clean"))
    speakers = PartitionSet.from_records(test.records, "speaker")
    assert speakers.partition == PartitionType.SPEAKER
    assert len(speakers.keys()) == 2
    with pytest.raises(InvalidParameterError):
        PartitionType.parse("room")

def test_frame_error_rates():
    gold = {"a": np.zeros(10, dtype=int), "b": np.arange(20) % 3}
    assert frame_error_report(gold, gold).overall == 0.0
    wrong = {utt: labels + 1 for utt, labels in gold.items()}
    assert frame_error_report(wrong, gold).overall == 1.0

    predicted = {"a": np.array([0, 0, 1, 0, 0, 2, 0, 0, 0, 0]), "b": gold["b"].copy()}
    flipped = [0, 4, 7, 11, 19]
    predicted["b"][flipped] = (gold["b"][flipped] + 1) % 3
    errors = int(np.sum(predicted["a"] != gold["a"]) + np.sum(predicted["b"] != gold["b"]))
    assert errors == 7
    partition_set = PartitionSet(PartitionType.SPEAKER, {"a": "s1", "b": "s2"})
    report = frame_error_report(predicted, gold, partition_set)
    assert report.overall == pytest.approx(7 / 30)
    assert report.fer("s1") == pytest.approx(2 / 10)
    assert report.fer("s2") == pytest.approx(5 / 20)
    assert list(report.per_partition.columns) == ["Errors", "Frames", "FER"]
    assert report.per_partition.index.name == "Partition"

    with pytest.raises(DataError):
        frame_error_report({"a": np.zeros(3)}, gold)

def test_first_pass_targets_are_argmax(splits, model):
    _, test = splits
    targets = first_pass_targets(model, test.features)
    for utt, f in test.features.items():
        assert np.array_equal(targets[utt], np.argmax(forward(model, f), axis=1))

def test_adaptation_freezes_base_network(splits, model):
    _, test = splits
    environments = _environment_set(test)
    pseudo = first_pass_targets(model, test.features)
    fingerprint = model.fingerprint()
    config = AdaptationConfig(positions=(0, 1), lr=0.05, max_epochs=2)
    outcomes = adapt_all(model, environments, test.features, pseudo, config)
    assert model.fingerprint() == fingerprint
    assert list(outcomes) == ["channel", "clean"]
    assert set(model.at_slots) == {(p, k) for p in (0, 1) for k in ("environment:channel", "environment:clean")}
    assert any(t.distance_from_identity() > 0 for outcome in outcomes.values() for t in outcome.transforms)

    curve = outcomes["clean"].curve
    assert curve.index.name == "Epoch"
    assert list(curve.columns) == ["Train_Loss", "CVFA", "Learning_Rate", "Distance_From_Identity"]
    assert curve.loc[0, "Distance_From_Identity"] == 0.0

def test_zero_epochs_reproduce_baseline(splits, model):
    _, test = splits
    environments = _environment_set(test)
    pseudo = first_pass_targets(model, test.features)
    outcomes = adapt_all(model, environments, test.features, pseudo, AdaptationConfig(positions=(1,), max_epochs=0))
    transforms = {key: outcome.transforms for key, outcome in outcomes.items()}
    assert all(t.distance_from_identity() == 0.0 for ts in transforms.values() for t in ts)
    assert len(outcomes["clean"].curve) == 1

    baseline = evaluate(model, test.features, test.labels, group_by=environments)
    adapted = evaluate(model, test.features, test.labels, partition_set=environments, transforms=transforms)
    assert adapted.overall == baseline.overall
    pd.testing.assert_frame_equal(adapted.per_partition, baseline.per_partition)

def test_regularizer_pulls_toward_identity(splits, model):
    _, test = splits
    environments = _environment_set(test)
    members = environments.members("clean")
    transform = insert_affine(model, 1, slot_key(PartitionType.ENVIRONMENT, "clean"))
    rng = np.random.default_rng(0)
    for direction in transform.directions:
        weight, bias = transform.pair(direction)
        weight += 0.3 * rng.standard_normal(weight.shape)
        bias += 0.3 * rng.standard_normal(bias.shape)

    config = AdaptationConfig(positions=(1,), lr=0.01, momentum=0.0, l2_to_identity=1.0, data_loss_weight=0.0, max_epochs=6)
    features = {u: test.features[u] for u in members}
    pseudo = first_pass_targets(model, features)
    outcome = adapt_partition(model, "clean", features, pseudo, config)
    distances = outcome.curve["Distance_From_Identity"].to_numpy()
    assert distances[0] > 0
    assert np.all(np.diff(distances) < 0)

def test_learning_rate_only_decays_by_the_factor(splits, model):
    _, test = splits
    environments = _environment_set(test)
    pseudo = first_pass_targets(model, test.features)
    outcomes = adapt_all(model, environments, test.features, pseudo, AdaptationConfig(lr=0.05, max_epochs=4))
    rates = outcomes["clean"].curve["Learning_Rate"].to_numpy()
    for before, after in zip(rates[:-1], rates[1:]):
        assert after == pytest.approx(before) or after == pytest.approx(before / np.sqrt(2.0))

def test_parallel_adaptation_matches_serial(splits, model):
    _, test = splits
    environments = _environment_set(test)
    pseudo = first_pass_targets(model, test.features)
    threaded_model = copy.deepcopy(model)
    serial = adapt_all(model, environments, test.features, pseudo, AdaptationConfig(lr=0.05, max_epochs=1))
    threaded = adapt_all(threaded_model, environments, test.features, pseudo, AdaptationConfig(lr=0.05, max_epochs=1, workers=2))
    for key in serial:
        assert np.array_equal(serial[key].transforms[0].weight_fwd, threaded[key].transforms[0].weight_fwd)

def test_adaptation_errors(splits, model):
    _, test = splits
    environments = _environment_set(test)
    features = {u: test.features[u] for u in environments.members("clean")}
    pseudo = first_pass_targets(model, features)
    with pytest.raises(MissingSlotError):
        adapt_partition(model, "clean", features, pseudo, AdaptationConfig(positions=(1,)))
    with pytest.raises(AdaptationError):
        adapt_partition(model, "clean", {}, pseudo, AdaptationConfig(positions=(1,)))

    outcomes = adapt_all(model, environments, test.features, first_pass_targets(model, test.features),
                         AdaptationConfig(positions=(1,), max_epochs=0))
    partial = {"clean": outcomes["clean"].transforms}
    with pytest.raises(UncoveredPartitionError):
        evaluate(model, test.features, test.labels, partition_set=environments, transforms=partial)
    with pytest.raises(InvalidParameterError):
        AdaptationConfig(lr=0.0)
    with pytest.raises(InvalidParameterError):
        AdaptationConfig(activation="tanh")

def test_positions_and_rows():
    assert parse_positions("all", 2) == (0, 1, 2)
    assert parse_positions("(1,2)", 3) == (1, 2)
    assert parse_positions("2, 1", 3) == (1, 2)
    with pytest.raises(InvalidParameterError):
        parse_positions("5", 3)
    with pytest.raises(InvalidParameterError):
        parse_positions("first", 3)
    assert position_label((1,)) == "1"
    assert position_label((1, 2)) == "(1,2)"

    config = PipelineConfig()
    assert list(config.rows(3)) == ["1", "2", "all", "(1,2)"]
    assert list(config.rows(1)) == ["all"]
    assert list(PipelineConfig(position_labels=("0", "all")).rows(2).values()) == [(0,), (0, 1, 2)]

def test_pipeline_stage_names_the_stage():
    with pytest.raises(PipelineStageError) as info:
        with pipeline_stage("ubm"):
            raise DataError("no frames")
    assert str(info.value) == "[ubm] no frames"
    assert info.value.stage == "ubm"

def test_adaptation_grid_shape(splits, model):
    _, test = splits
    config = PipelineConfig(adaptation=AdaptationConfig(lr=0.05, max_epochs=1),
                            cascade=(("environment", (0,)), ("speaker", (1,))))
    grid, results = adaptation_grid(model, test, config)
    assert list(grid.index) == ["---", "1", "all", "(1,2)", "environment 0 > speaker 1"]
    assert grid.index.name == "Position"
    assert list(grid.columns.names) == ["Target", "Subset"]
    assert list(grid.columns) == [(t, s) for t in ("ENVIRONMENT", "SPEAKER") for s in ("channel", "clean", "Avg.")]
    values = grid.iloc[:4].to_numpy()
    assert np.all((values >= 0.0) & (values <= 1.0))
    assert grid.loc["---", ("ENVIRONMENT", "Avg.")] == grid.loc["---", ("SPEAKER", "Avg.")]
    # the cascade fills only its last stage's columns
    assert grid.loc["environment 0 > speaker 1", "ENVIRONMENT"].isna().all()
    assert grid.loc["environment 0 > speaker 1", "SPEAKER"].notna().all()

    assert set(results) == {(row, p) for row in ("1", "all", "(1,2)") for p in (PartitionType.ENVIRONMENT, PartitionType.SPEAKER)}
    result = results[("all", PartitionType.SPEAKER)]
    assert result.positions == (0, 1, 2)
    assert result.before.overall == grid.loc["---", ("SPEAKER", "Avg.")]
    assert model.at_slots == {}

def test_cascade_needs_nested_partitions(splits, model):
    _, test = splits
    environments = _environment_set(test)
    pseudo = first_pass_targets(model, test.features)
    # every partition mixes utterances adapted under two different earlier keys
    prior = {utt: ("a",) if i % 2 else ("b",) for i, utt in enumerate(test.features)}
    with pytest.raises(AdaptationError):
        adapt_all(model, environments, test.features, pseudo, AdaptationConfig(max_epochs=0), prior=prior)

def test_same_key_under_both_partition_types(splits, model):
    _, test = splits
    pseudo = first_pass_targets(model, test.features)
    environment = PartitionSet(PartitionType.ENVIRONMENT, {utt: "shared" for utt in test.features})
    speaker = PartitionSet(PartitionType.SPEAKER, {utt: "shared" for utt in test.features})
    first = adapt_all(model, environment, test.features, pseudo, AdaptationConfig(positions=(1,), lr=0.05, max_epochs=1))
    prior = {utt: (slot_key(PartitionType.ENVIRONMENT, "shared"),) for utt in test.features}
    second = adapt_all(model, speaker, test.features, pseudo,
                       AdaptationConfig(partition="speaker", positions=(1,), lr=0.05, max_epochs=1), prior=prior)
    assert set(model.at_slots) == {(1, "environment:shared"), (1, "speaker:shared")}
    assert first["shared"].transforms[0] is not second["shared"].transforms[0]

    report = evaluate(model, test.features, test.labels, partition_set=speaker, transforms={"shared": second["shared"].transforms},
                      prior_stages=[(environment, {"shared": first["shared"].transforms})])
    assert 0.0 <= report.overall <= 1.0
    with pytest.raises(InvalidParameterError):
        adapt_all(model, speaker, test.features, pseudo, AdaptationConfig(positions=(1,)))

def _small_pipeline(**overrides):
    settings = dict(ubm_components=2, ubm_iterations=2, vad_components=2, vad_iterations=2, ivector_rank=2, tv_iterations=2,
                    layer_sizes=(3, 3), train=TrainConfig(max_epochs=1), adaptation=AdaptationConfig(lr=0.05, max_epochs=1),
                    position_labels=("1",))
    settings.update(overrides)
    return PipelineConfig(**settings)

def test_cumulative_pipeline(splits):
    train, test = splits
    report = cumulative_pipeline(train, test, _small_pipeline())
    assert set(report.grids) == {"adaptation-no-ivectors", "adaptation-ivectors"}
    for grid in report.grids.values():
        assert list(grid.index) == ["---", "1"]
    assert report.system.models[False].ivector_dim == 0
    assert report.system.models[True].ivector_dim == 2
    assert set(report.system.ivectors["test"]) == set(test.features)
    assert ("adaptation-ivectors", "1", PartitionType.SPEAKER) in report.results

def test_ivector_norm_grid(splits):
    train, test = splits
    grid = ivector_norm_grid(train, test, _small_pipeline(), ranks=(2, 3), methods=("none", "rg"))
    assert grid.index.name == "Normalization"
    assert list(grid.index) == ["NONE", "RG"]
    assert grid.columns.name == "Rank"
    assert list(grid.columns) == [2, 3]
    assert np.all((grid.to_numpy() >= 0.0) & (grid.to_numpy() <= 1.0))

def test_cumulative_trend_on_desk_corpus():
    cfg = ExperimentConfig()
    corpus = generate(cfg.corpus_spec())
    train, test = DataSplit.from_corpus(corpus, "train"), DataSplit.from_corpus(corpus, "test")
    config = dataclasses.replace(cfg.pipeline_config(), position_labels=("1",), partitions=(PartitionType.ENVIRONMENT,))
    grids = cumulative_pipeline(train, test, config).grids
    bare, augmented = grids["adaptation-no-ivectors"], grids["adaptation-ivectors"]
    column = ("ENVIRONMENT", "Avg.")
    first_pass, ivectors_only = bare.loc["---", column], augmented.loc["---", column]
    transform_only, cumulative = bare.loc["1", column], augmented.loc["1", column]
    assert relative_reduction(first_pass, ivectors_only) >= 0.05
    assert relative_reduction(ivectors_only, cumulative) >= 0.05
    assert cumulative <= min(ivectors_only, transform_only)

def _distorted_system(strength):
    """An SI model trained on clean speech, tested on a test-only environment distorted with the given strength."""
    cfg = ExperimentConfig({"corpus": {"environments": f"clean:0:0, dist:{strength}:{strength}:test"},
                            "acoustic": {"layer_sizes": "16, 16"}, "adapt": {"positions": "0"}})
    corpus = generate(cfg.corpus_spec())
    train, test = DataSplit.from_corpus(corpus, "train"), DataSplit.from_corpus(corpus, "test")
    m = train_acoustic(train, cfg.pipeline_config(), None, max(train.num_classes, test.num_classes))
    return m, test, cfg.adaptation_config()

def _distorted_fer(m, test, adaptation):
    working = copy.deepcopy(m)
    environments = test.environments()
    pseudo = first_pass_targets(working, test.features)
    outcomes = adapt_all(working, environments, test.features, pseudo, adaptation)
    transforms = {key: outcome.transforms for key, outcome in outcomes.items()}
    before = evaluate(m, test.features, test.labels, group_by=environments).fer("dist")
    after = evaluate(working, test.features, test.labels, partition_set=environments, transforms=transforms).fer("dist")
    return before, after

def test_input_transform_undoes_planted_distortion():
    m, test, adaptation = _distorted_system(0.6)
    before, after = _distorted_fer(m, test, adaptation)
    assert after < before

def test_input_transform_without_distortion():
    m, test, adaptation = _distorted_system(0.0)
    # at the desk learning rate self-training on first-pass labels may still lower FER, but never raises it
    before, after = _distorted_fer(m, test, adaptation)
    assert after - before <= 0.005
    before, after = _distorted_fer(m, test, dataclasses.replace(adaptation, lr=1e-6))
    assert abs(after - before) <= 0.005
