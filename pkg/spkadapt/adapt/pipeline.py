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
The cumulative two-pass system and the experiment grids built on it.

First pass: a UBM and total-variability model give one i-vector per utterance, which
is appended to every frame of a speaker-independent BLSTM. Second pass: its argmax
output serves as pseudo-labels to train per-partition affine transforms.
"""

import copy
import dataclasses
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from spkadapt.adapt.harness import (AdaptationConfig, AdaptationResult, PartitionSet, PartitionType, adapt_all, evaluate,
                                    first_pass_targets, slot_key, split_train_cv)
from spkadapt.corpus.generator import SILENCE_CLASS
from spkadapt.corpus.manifest import DatasetManifest
from spkadapt.exceptions import InvalidParameterError, PipelineStageError, SpkadaptError
from spkadapt.features.frontend import Frontend, FrontendConfig
from spkadapt.features.transforms import UBM_PATHWAYS, cmvn, ubm_pipeline
from spkadapt.models.acoustic import TrainConfig, build_model, train_model
from spkadapt.models.gmm import classify_speech, fit_gmm, train_vad
from spkadapt.models.ivector import Normalization, collect_stats, extract_ivectors, fit_rg, normalize_ivectors, train_tv
from spkadapt.tools.report_tools import standardize_axes_names

logger = logging.getLogger(__name__)

BASELINE_ROW = "---"
ALL_POSITIONS = "all"
AVERAGE_COLUMN = "Avg."


@dataclass
class DataSplit:
    """Features, gold labels and speaker/environment records of one data set, all keyed by utterance id."""
    features: dict
    labels: dict
    records: pd.DataFrame

    def __post_init__(self):
        for utt_id, f in self.features.items():
            if utt_id not in self.labels:
                raise InvalidParameterError(f"No labels for utterance '{utt_id}'.")
            if np.asarray(self.labels[utt_id]).size != f.num_frames:
                raise InvalidParameterError(f"'{utt_id}' has {f.num_frames} frames but {np.asarray(self.labels[utt_id]).size} labels.")

    @classmethod
    def from_corpus(cls, corpus, name):
        return cls(corpus.features(name), corpus.labels(name), corpus.records(name))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, frontend: FrontendConfig = None):
        return cls(manifest.load_features(frontend), manifest.load_labels(), manifest.records)

    @property
    def num_classes(self):
        return int(max(np.max(labels) for labels in self.labels.values())) + 1

    def environments(self):
        return PartitionSet.from_records(self.records, PartitionType.ENVIRONMENT)

    def speakers(self):
        return {utt: str(spk) for utt, spk in self.records["Speaker_ID"].items()}


@dataclass
class PipelineConfig:
    """Settings of the whole two-pass system.

    Attributes:
        ubm_components (int)
        ubm_iterations (int)
        vad_components (int)
        vad_iterations (int)
        use_vad (bool): Speech masks for test i-vectors come from the VAD; otherwise every frame is used.
        ivector_rank (int)
        tv_iterations (int)
        normalization (Normalization)
        layer_sizes (tuple of int)
        cv_fraction (float): Held-out share of training utterances for the acoustic model's CVFA.
        train (TrainConfig)
        adaptation (AdaptationConfig): partition and positions are overridden per grid cell.
        position_labels (tuple of str): Grid rows, e.g. "1", "all", "(1,2)". Empty gives 1..L-1, all and (1,2)
            (the last only when L >= 2).
        partitions (tuple of PartitionType): Grid column groups.
        cascade (tuple): Optional ((PartitionType, positions), (PartitionType, positions)) chained adaptation.
        workers (int)
        seed (int)
        verbose (bool)
    """
    ubm_components: int = 64
    ubm_iterations: int = 8
    vad_components: int = 16
    vad_iterations: int = 8
    use_vad: bool = True
    ivector_rank: int = 10
    tv_iterations: int = 5
    normalization: Normalization = Normalization.SQRT_D
    layer_sizes: tuple = (32, 32)
    cv_fraction: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    position_labels: tuple = ()
    partitions: tuple = (PartitionType.ENVIRONMENT, PartitionType.SPEAKER)
    cascade: tuple = ()
    workers: int = 1
    seed: int = 0
    verbose: bool = False

    def __post_init__(self):
        self.normalization = Normalization.parse(self.normalization)
        self.partitions = tuple(PartitionType.parse(p) for p in self.partitions)
        self.cascade = tuple((PartitionType.parse(p), tuple(positions)) for p, positions in self.cascade)
        if self.cascade and len(self.cascade) != 2:
            raise InvalidParameterError("A cascade chains exactly two adaptation stages.")
        if min(self.ubm_components, self.ivector_rank, self.vad_components) < 1 or not self.layer_sizes:
            raise InvalidParameterError("UBM size, VAD size, i-vector rank and layer sizes must be positive.")

    def rows(self, num_layers):
        """Grid row label -> slot positions."""
        labels = self.position_labels
        if not labels:
            labels = tuple(str(p) for p in range(1, num_layers)) + (ALL_POSITIONS,)
            if num_layers >= 2:
                labels += ("(1,2)",)
        return {label: parse_positions(label, num_layers) for label in labels}


def parse_positions(text, num_layers):
    """Slot positions from "all", "3", "1,2" or "(1,2)". "all" is every slot 0..L."""
    text = str(text).strip()
    if text == ALL_POSITIONS:
        return tuple(range(num_layers + 1))
    try:
        positions = tuple(sorted(set(int(p) for p in text.strip("()").split(",") if p.strip())))
    except ValueError:
        raise InvalidParameterError(f"Can't read slot positions from '{text}'. Use 'all' or a comma-separated list.") from None
    if not positions or not all(0 <= p <= num_layers for p in positions):
        raise InvalidParameterError(f"Slot positions must lie in 0..{num_layers}, got '{text}'.")
    return positions


def position_label(positions):
    positions = tuple(positions)
    return str(positions[0]) if len(positions) == 1 else "(" + ",".join(str(p) for p in positions) + ")"


@contextmanager
def pipeline_stage(stage):
    """Time a stage and relabel package errors raised inside it with the stage name."""
    start = time.perf_counter()
    logger.info("Stage %s started", stage)
    try:
        yield
    except PipelineStageError:
        raise
    except (SpkadaptError, np.linalg.LinAlgError) as e:
        raise PipelineStageError(stage, str(e)) from e
    logger.info("Stage %s finished in %.2f s", stage, time.perf_counter() - start)


def speech_masks(labels):
    return {utt: np.asarray(seq).ravel() != SILENCE_CLASS for utt, seq in labels.items()}


def vad_masks(vad, features):
    """Per-utterance VAD speech flags; utterances with no detected speech fall back to every frame."""
    masks = {}
    for utt_id, f in features.items():
        flags = classify_speech(vad, f)
        if flags.any():
            masks[utt_id] = flags
        else:
            logger.warning("VAD found no speech in '%s'; using every frame", utt_id)
    return masks


@dataclass
class SpeakerIndependentSystem:
    """The trained first-pass system."""
    ubm: object
    vad: object
    tv: object
    rg: object
    ivectors: dict
    models: dict = field(default_factory=dict)


def train_background(train: DataSplit, config: PipelineConfig):
    """UBM on training speech frames plus a speech/non-speech VAD.

    Returns:
    tuple: (DiagonalGmm, VadModel or None when VAD is off or the data has no silence)
    """
    masks = speech_masks(train.labels)
    speech = np.vstack([f.frames[masks[u]] for u, f in train.features.items()])
    nonspeech = np.vstack([f.frames[~masks[u]] for u, f in train.features.items()])
    with pipeline_stage("ubm"):
        ubm = fit_gmm(speech, config.ubm_components, config.ubm_iterations, config.seed, config.verbose)
    vad = None
    if config.use_vad and nonspeech.shape[0] > 0:
        with pipeline_stage("vad"):
            vad = train_vad(speech, nonspeech, config.vad_components, config.seed, config.vad_iterations)
    return ubm, vad


def train_extractor(ubm, train: DataSplit, config: PipelineConfig, rank=None):
    """Total-variability model on label-masked training statistics."""
    with pipeline_stage("tv"):
        stats = collect_stats(ubm, list(train.features.values()), speech_masks(train.labels), config.workers)
        return train_tv(ubm, stats, rank or config.ivector_rank, config.tv_iterations, config.seed, config.workers, config.verbose)


def extract_split_ivectors(tv, vad, train: DataSplit, test: DataSplit, config: PipelineConfig, method=None):
    """Normalized i-vectors of both splits; RG is fitted on training i-vectors only.

    Returns:
    tuple: (train i-vectors, test i-vectors, RgTransform or None)
    """
    method = Normalization.parse(method or config.normalization)
    with pipeline_stage("ivectors"):
        raw_train = extract_ivectors(tv, list(train.features.values()), speech_masks(train.labels), config.workers)
        test_masks = vad_masks(vad, test.features) if vad is not None else None
        raw_test = extract_ivectors(tv, list(test.features.values()), test_masks, config.workers)
        rg = fit_rg(list(raw_train.values())) if method == Normalization.RG else None
        return normalize_ivectors(raw_train, method, rg), normalize_ivectors(raw_test, method, rg), rg


def train_acoustic(train: DataSplit, config: PipelineConfig, ivectors=None, num_classes=None):
    """Speaker-independent BLSTM, with i-vector augmentation when `ivectors` is given."""
    with pipeline_stage("acoustic-model"):
        train_ids, cv_ids = split_train_cv(list(train.features), config.cv_fraction, config.seed)

        def dataset(ids):
            return [(train.features[u], ivectors[u] if ivectors is not None else None, train.labels[u]) for u in ids]

        first = next(iter(train.features.values()))
        ivector_dim = next(iter(ivectors.values())).dim if ivectors is not None else 0
        m = build_model(first.dim, ivector_dim, config.layer_sizes, num_classes or train.num_classes, config.seed)
        m, _ = train_model(m, dataset(train_ids), dataset(cv_ids), config.train, config.verbose)
        return m


def train_system(train: DataSplit, test: DataSplit, config: PipelineConfig) -> SpeakerIndependentSystem:
    """Everything the first pass needs: UBM, VAD, TV, i-vectors and both SI models (with and without i-vectors)."""
    ubm, vad = train_background(train, config)
    tv = train_extractor(ubm, train, config)
    train_ivs, test_ivs, rg = extract_split_ivectors(tv, vad, train, test, config)
    system = SpeakerIndependentSystem(ubm, vad, tv, rg, {"train": train_ivs, "test": test_ivs})
    num_classes = max(train.num_classes, test.num_classes)
    system.models[False] = train_acoustic(train, config, None, num_classes)
    system.models[True] = train_acoustic(train, config, train_ivs, num_classes)
    return system


def run_adaptation(m, test: DataSplit, pseudo_targets, partition, positions, config: PipelineConfig, ivectors=None):
    """Adapt a copy of m for one partition type at one position set and evaluate it, grouped by environment."""
    working = copy.deepcopy(m)
    adaptation = dataclasses.replace(config.adaptation, partition=partition, positions=tuple(positions), workers=config.workers)
    partition_set = PartitionSet.from_records(test.records, partition)
    environments = test.environments()
    with pipeline_stage("adaptation"):
        outcomes = adapt_all(working, partition_set, test.features, pseudo_targets, adaptation, ivectors)
    transforms = {key: outcome.transforms for key, outcome in outcomes.items()}
    with pipeline_stage("evaluation"):
        before = evaluate(m, test.features, test.labels, ivectors, group_by=environments)
        after = evaluate(working, test.features, test.labels, ivectors, partition_set, transforms, group_by=environments)
    return AdaptationResult(partition, tuple(positions), transforms, before, after,
                            {key: outcome.curve for key, outcome in outcomes.items()})


def run_cascade(m, test: DataSplit, pseudo_targets, config: PipelineConfig, ivectors=None):
    """Environment-then-speaker style chained adaptation; the second stage runs on top of the first.

    Returns:
    FerReport of the cascaded system, grouped by environment.
    """
    working = copy.deepcopy(m)
    stages = []
    prior = None
    for partition, positions in config.cascade:
        adaptation = dataclasses.replace(config.adaptation, partition=partition, positions=positions, workers=config.workers)
        partition_set = PartitionSet.from_records(test.records, partition)
        with pipeline_stage("adaptation"):
            outcomes = adapt_all(working, partition_set, test.features, pseudo_targets, adaptation, ivectors, prior)
        stages.append((partition_set, {key: outcome.transforms for key, outcome in outcomes.items()}))
        prior = {utt: tuple(slot_key(stage_set.partition, stage_set.mapping[utt]) for stage_set, _ in stages) for utt in test.features}
    (first_set, first_transforms), (last_set, last_transforms) = stages
    with pipeline_stage("evaluation"):
        return evaluate(working, test.features, test.labels, ivectors, last_set, last_transforms,
                        prior_stages=[(first_set, first_transforms)], group_by=test.environments())


def _subset_values(report):
    values = dict(report.per_partition["FER"])
    values[AVERAGE_COLUMN] = report.overall
    return values


def adaptation_grid(m, test: DataSplit, config: PipelineConfig, ivectors=None):
    """Rows: "---" (first pass only) then one per position set and an optional cascade row.
    Columns: (adaptation target, test environment subset or "Avg.").

    Returns:
    tuple: (grid pandas.DataFrame, dict (row label, PartitionType) -> AdaptationResult)
    """
    with pipeline_stage("first-pass"):
        pseudo_targets = first_pass_targets(m, test.features, ivectors)
        baseline = evaluate(m, test.features, test.labels, ivectors, group_by=test.environments())
    subsets = list(test.environments().keys()) + [AVERAGE_COLUMN]
    columns = pd.MultiIndex.from_product([[p.value for p in config.partitions], subsets], names=["Target", "Subset"])

    baseline_values = _subset_values(baseline)
    rows = {BASELINE_ROW: {(p.value, s): baseline_values[s] for p in config.partitions for s in subsets}}
    results = {}
    for label, positions in tqdm(config.rows(m.num_layers).items(), desc="Adaptation grid", disable=not config.verbose):
        rows[label] = {}
        for partition in config.partitions:
            result = run_adaptation(m, test, pseudo_targets, partition, positions, config, ivectors)
            results[(label, partition)] = result
            values = _subset_values(result.after)
            rows[label].update({(partition.value, s): values[s] for s in subsets})
            logger.info("Position %s, %s adaptation: FER %.4f -> %.4f", label, partition.value, result.before.overall, result.after.overall)

    if config.cascade:
        label = " > ".join(f"{p.value.lower()} {position_label(pos)}" for p, pos in config.cascade)
        values = _subset_values(run_cascade(m, test, pseudo_targets, config, ivectors))
        last = config.cascade[-1][0].value
        rows[label] = {(last, s): values[s] for s in subsets if (last, s) in columns}

    grid = pd.DataFrame([[row.get(c, np.nan) for c in columns] for row in rows.values()], index=list(rows), columns=columns)
    return standardize_axes_names(grid, "Position"), results


@dataclass
class PipelineReport:
    """Grids by table name plus the adaptation results behind them."""
    grids: dict
    results: dict
    system: SpeakerIndependentSystem


def cumulative_pipeline(train: DataSplit, test: DataSplit, config: PipelineConfig = None) -> PipelineReport:
    """Train the first-pass system, then run the adaptation grid without and with i-vectors.

    Returns:
    PipelineReport: grids "adaptation-no-ivectors" and "adaptation-ivectors".
    """
    config = config or PipelineConfig()
    system = train_system(train, test, config)
    grids, results = {}, {}
    for with_ivectors, name in ((False, "adaptation-no-ivectors"), (True, "adaptation-ivectors")):
        ivectors = system.ivectors["test"] if with_ivectors else None
        grids[name], grid_results = adaptation_grid(system.models[with_ivectors], test, config, ivectors)
        results.update({(name,) + key: value for key, value in grid_results.items()})
    return PipelineReport(grids, results, system)


def ivector_norm_grid(train: DataSplit, test: DataSplit, config: PipelineConfig, ranks, methods=tuple(Normalization)):
    """FER of the i-vector model for every normalization x rank.

    Rows are normalization methods, columns ranks; cells are overall test FER.
    """
    ubm, vad = train_background(train, config)
    num_classes = max(train.num_classes, test.num_classes)
    rows = {Normalization.parse(method).value: {} for method in methods}
    for rank in tqdm(ranks, desc="Ranks", disable=not config.verbose):
        tv = train_extractor(ubm, train, config, rank)
        for method in methods:
            method = Normalization.parse(method)
            train_ivs, test_ivs, _ = extract_split_ivectors(tv, vad, train, test, config, method)
            m = train_acoustic(train, config, train_ivs, num_classes)
            with pipeline_stage("evaluation"):
                rows[method.value][int(rank)] = evaluate(m, test.features, test.labels, test_ivs).overall
            logger.info("Rank %d, %s normalization: FER %.4f", rank, method.value, rows[method.value][int(rank)])

    grid = pd.DataFrame.from_dict(rows, orient="index")[[int(r) for r in ranks]]
    grid.columns.name = "Rank"
    return standardize_axes_names(grid, "Normalization")


def pathway_features(train_audio: DatasetManifest, test_audio: DatasetManifest, frontend: FrontendConfig):
    """Static frontend features of both splits, computed from the manifests' WAV entries."""
    with pipeline_stage("features"):
        return train_audio.load_features(frontend), test_audio.load_features(frontend)


def ubm_feature_grid(train_audio: DatasetManifest, test_audio: DatasetManifest, config: PipelineConfig,
                     frontend: FrontendConfig = FrontendConfig(), pathways=UBM_PATHWAYS):
    """FER of the i-vector model when the UBM and TV model are trained on each feature pathway.

    The acoustic model always sees CMVN-normalized GT features; only the i-vector features change.
    Row "---" is the model without i-vectors. Columns are test environments plus "Avg.".
    """
    static = {}
    for kind in (Frontend.ERB_GT, Frontend.MEL_MFCC):
        static[kind] = pathway_features(train_audio, test_audio, dataclasses.replace(frontend, frontend=kind))
    gt_train, gt_test = static[Frontend.ERB_GT]
    am_train = DataSplit({u: cmvn(f) for u, f in gt_train.items()}, train_audio.load_labels(), train_audio.records)
    am_test = DataSplit({u: cmvn(f) for u, f in gt_test.items()}, test_audio.load_labels(), test_audio.records)
    num_classes = max(am_train.num_classes, am_test.num_classes)
    environments = am_test.environments()
    subsets = environments.keys() + [AVERAGE_COLUMN]

    baseline = train_acoustic(am_train, config, None, num_classes)
    with pipeline_stage("evaluation"):
        rows = {BASELINE_ROW: _subset_values(evaluate(baseline, am_test.features, am_test.labels, group_by=environments))}

    for pathway in tqdm(pathways, desc="UBM pathways", disable=not config.verbose):
        train_static, test_static = static[pathway.frontend]
        with pipeline_stage("features"):
            lda = pathway.fit(list(train_static.values()), [am_train.labels[u] for u in train_static])
            ubm_train = DataSplit({u: ubm_pipeline(pathway, f, lda) for u, f in train_static.items()}, am_train.labels, am_train.records)
            ubm_test = DataSplit({u: ubm_pipeline(pathway, f, lda) for u, f in test_static.items()}, am_test.labels, am_test.records)
        ubm, vad = train_background(ubm_train, config)
        tv = train_extractor(ubm, ubm_train, config)
        train_ivs, test_ivs, _ = extract_split_ivectors(tv, vad, ubm_train, ubm_test, config)
        m = train_acoustic(am_train, config, train_ivs, num_classes)
        with pipeline_stage("evaluation"):
            rows[pathway.label] = _subset_values(evaluate(m, am_test.features, am_test.labels, test_ivs, group_by=environments))
        logger.info("UBM features %s: FER %.4f", pathway.label, rows[pathway.label][AVERAGE_COLUMN])

    grid = pd.DataFrame.from_dict(rows, orient="index")[subsets]
    grid.columns.name = "Subset"
    return standardize_axes_names(grid, "UBM_Features")
