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
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from hashlib import md5

import numpy as np
import pandas as pd

from spkadapt.exceptions import (AdaptationError, DataError, InvalidParameterError, MissingSlotError,
                                 NoCrossValidationWarning, UncoveredPartitionError)
from spkadapt.models.acoustic import (AT_ACTIVATIONS, MIN_LEARNING_RATE, BlstmAcousticModel, Optimizer, TrainConfig,
                                      backward, frame_accuracy, insert_affine, predict_labels)

logger = logging.getLogger(__name__)

# Adaptation trains with plain cross-entropy, no dropout and no noise
_ADAPTATION_LOSS = TrainConfig(dropout_prob=0.0, l2_scale=0.0, grad_noise_variance=0.0, focal_gamma=0.0, pretrain=False)


class PartitionType(str, Enum):
    SPEAKER = "SPEAKER"
    ENVIRONMENT = "ENVIRONMENT"

    @classmethod
    def parse(cls, text):
        try:
            return cls(str(getattr(text, "value", text)).upper())
        except ValueError:
            raise InvalidParameterError(f"Unknown partition type '{text}'. Use speaker or environment.") from None

    @property
    def column(self):
        return "Speaker_ID" if self == PartitionType.SPEAKER else "Environment_ID"


def slot_key(partition, key):
    """Affine slot key of a partition key, prefixed with its partition type (e.g. "speaker:spk001")."""
    return f"{PartitionType.parse(partition).value.lower()}:{key}"


@dataclass
class AdaptationConfig:
    """Second-pass adaptation settings.

    Attributes:
        partition (PartitionType): One transform set per speaker or per environment.
        positions (tuple of int): Slot positions adapted together.
        lr (float)
        momentum (float)
        l2_to_identity (float): Scale of the ||W - I||^2 + ||b||^2 penalty.
        cv_fraction (float): Share of each partition's utterances held out for CV frame accuracy.
        seed (int)
        max_epochs (int)
        activation (str): identity, sigmoid or relu.
        lr_decay_factor (float): Divisor applied when CV frame accuracy stalls.
        data_loss_weight (float): Weight of the cross-entropy term; 0 leaves only the regularizer.
        workers (int): Partitions adapted in parallel.
    """
    partition: PartitionType = PartitionType.ENVIRONMENT
    positions: tuple = (1,)
    lr: float = 1e-6
    momentum: float = 0.9
    l2_to_identity: float = 0.01
    cv_fraction: float = 0.1
    seed: int = 0
    max_epochs: int = 5
    activation: str = "identity"
    lr_decay_factor: float = float(np.sqrt(2.0))
    data_loss_weight: float = 1.0
    workers: int = 1

    def __post_init__(self):
        self.partition = PartitionType.parse(self.partition)
        self.positions = tuple(sorted(set(int(p) for p in self.positions)))
        if not self.positions:
            raise InvalidParameterError("Adaptation needs at least one slot position.")
        if self.lr <= 0:
            raise InvalidParameterError(f"Adaptation learning rate must be positive, got {self.lr}.")
        if not 0.0 < self.cv_fraction < 1.0:
            raise InvalidParameterError(f"cv_fraction must lie strictly between 0 and 1, got {self.cv_fraction}.")
        if self.momentum < 0 or self.l2_to_identity < 0 or self.max_epochs < 0 or self.data_loss_weight < 0:
            raise InvalidParameterError("momentum, l2_to_identity, max_epochs and data_loss_weight can't be negative.")
        if self.activation not in AT_ACTIVATIONS:
            raise InvalidParameterError(f"Unknown affine activation '{self.activation}'. Use one of {AT_ACTIVATIONS}.")


@dataclass(frozen=True)
class PartitionSet:
    """Utterance id -> partition key (a speaker or an environment), in manifest order."""
    partition: PartitionType
    mapping: dict

    def __post_init__(self):
        if not self.mapping:
            raise DataError("A partition set needs at least one utterance.")

    @classmethod
    def from_records(cls, records: pd.DataFrame, partition):
        """Build from a manifest-shaped table (DatasetManifest.records or Corpus.records)."""
        partition = PartitionType.parse(partition)
        return cls(partition, {str(utt): str(key) for utt, key in records[partition.column].items()})

    def keys(self):
        return sorted(set(self.mapping.values()))

    def members(self, key):
        return [utt for utt, value in self.mapping.items() if value == key]


@dataclass
class FerReport:
    """Frame error rates overall and per partition key.

    Attributes:
        overall (float)
        per_partition (pandas.DataFrame): Indexed by partition key with Errors, Frames and FER columns.
    """
    overall: float
    per_partition: pd.DataFrame

    def fer(self, key):
        return float(self.per_partition.loc[key, "FER"])


@dataclass
class AdaptationOutcome:
    partition_key: str
    transforms: list
    curve: pd.DataFrame


@dataclass
class AdaptationResult:
    """One adaptation run: the transforms per partition, before/after FER and training curves."""
    partition: PartitionType
    positions: tuple
    transforms: dict
    before: FerReport
    after: FerReport
    curves: dict = field(default_factory=dict)


def first_pass_targets(m: BlstmAcousticModel, features, ivectors=None, partitions=None):
    """Pseudo-labels from the speaker-independent pass: per-frame argmax of eval-mode posteriors.

    Parameters:
    m (BlstmAcousticModel)
    features (dict): utterance id -> FeatureMatrix.
    ivectors (dict, optional): utterance id -> IVector; required exactly for i-vector models.
    partitions (dict, optional): utterance id -> tuple of active slot keys (cascaded adaptation).

    Returns:
    dict: utterance id -> integer label sequence.
    """
    targets = {}
    for utt_id, f in features.items():
        iv = _lookup_ivector(ivectors, utt_id)
        active = partitions.get(utt_id, ()) if partitions else ()
        targets[utt_id] = predict_labels(m, f, iv, active)
    return targets


def _lookup_ivector(ivectors, utt_id):
    if ivectors is None:
        return None
    try:
        return ivectors[utt_id]
    except KeyError:
        raise DataError(f"No i-vector for utterance '{utt_id}'.") from None


def split_train_cv(utterances, cv_fraction, seed):
    """Randomly split a partition's utterances into train and CV lists, keeping input order in each.

    A single utterance can't be split; it is returned as training data with an empty CV list.
    """
    utterances = list(utterances)
    if not 0.0 < cv_fraction < 1.0:
        raise InvalidParameterError(f"cv_fraction must lie strictly between 0 and 1, got {cv_fraction}.")
    if len(utterances) < 2:
        warnings.warn(f"Only {len(utterances)} utterance(s) available; adapting without cross-validation.", NoCrossValidationWarning, stacklevel=2)
        return utterances, []
    count = len(utterances)
    cv_count = min(max(1, int(np.floor(count * cv_fraction + 0.5))), count - 1)
    held_out = set(np.random.default_rng(seed).permutation(count)[:cv_count].tolist())
    train = [utt for i, utt in enumerate(utterances) if i not in held_out]
    cv = [utt for i, utt in enumerate(utterances) if i in held_out]
    return train, cv


def _partition_seed(seed, key):
    return int(md5(f"{seed}:{key}".encode("utf-8")).hexdigest()[:8], 16)


def adapt_partition(m: BlstmAcousticModel, partition_key, features, pseudo_targets, config: AdaptationConfig,
                    ivectors=None, prior_partitions=()) -> AdaptationOutcome:
    """Train one partition's affine transforms on pseudo-labels, everything else frozen.

    Parameters:
    m (BlstmAcousticModel): Slots must already be inserted at config.positions for partition_key.
    partition_key (str)
    features (dict): utterance id -> FeatureMatrix of this partition.
    pseudo_targets (dict): utterance id -> first-pass labels.
    config (AdaptationConfig)
    ivectors (dict, optional)
    prior_partitions (tuple of str, optional): Slot keys of earlier, already adapted transforms that stay active.

    Returns:
    AdaptationOutcome: The trained transforms plus a per-epoch curve (epoch 0 is the untrained state).
    """
    partition_key = str(partition_key)
    if not features:
        raise AdaptationError(f"Partition '{partition_key}' has no utterances.")
    slot = slot_key(config.partition, partition_key)
    transforms = []
    for position in config.positions:
        if (position, slot) not in m.at_slots:
            raise MissingSlotError(f"No affine transform at position {position} for '{slot}'; insert it first.")
        transforms.append(m.at_slots[(position, slot)])

    seed = _partition_seed(config.seed, partition_key)
    train_ids, cv_ids = split_train_cv(list(features), config.cv_fraction, seed)
    active = tuple(prior_partitions) + (slot,)

    def dataset(ids):
        return [(features[u], _lookup_ivector(ivectors, u), pseudo_targets[u]) for u in ids]

    train_set, cv_set = dataset(train_ids), dataset(cv_ids)
    params = {}
    for transform in transforms:
        params.update(transform.parameter_names())
    optimizer = Optimizer("momentum", momentum=config.momentum)
    rng = np.random.default_rng(seed)
    lr = config.lr
    best_cvfa = frame_accuracy(m, cv_set, active) if cv_set else np.nan
    rows = [{"Epoch": 0, "Train_Loss": np.nan, "CVFA": best_cvfa, "Learning_Rate": lr,
             "Distance_From_Identity": sum(t.distance_from_identity() for t in transforms)}]

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for index in rng.permutation(len(train_set)):
            f, iv, targets = train_set[index]
            loss, grads = backward(m, f, iv, targets, _ADAPTATION_LOSS, partitions=active, trainable="affine",
                                   at_l2=config.l2_to_identity, data_weight=config.data_loss_weight)
            optimizer.step(params, grads, lr)
            losses.append(loss)
        cvfa = frame_accuracy(m, cv_set, active) if cv_set else np.nan
        rows.append({"Epoch": epoch, "Train_Loss": float(np.mean(losses)), "CVFA": cvfa, "Learning_Rate": lr,
                     "Distance_From_Identity": sum(t.distance_from_identity() for t in transforms)})
        if cv_set:
            if cvfa > best_cvfa:
                best_cvfa = cvfa
            else:
                lr /= config.lr_decay_factor
        if lr < MIN_LEARNING_RATE:
            break

    curve = pd.DataFrame(rows).set_index("Epoch")
    curve.columns.name = "Name"
    logger.debug("Adapted '%s' at positions %s over %d epoch(s)", partition_key, config.positions, len(rows) - 1)
    return AdaptationOutcome(partition_key, transforms, curve)


def adapt_all(m: BlstmAcousticModel, partition_set: PartitionSet, features, pseudo_targets, config: AdaptationConfig,
              ivectors=None, prior=None):
    """Insert slots for every partition key and adapt each partition, in parallel when config.workers > 1.

    Parameters:
    prior (dict, optional): utterance id -> tuple of earlier slot keys kept active (cascading).

    Returns:
    dict: partition key -> AdaptationOutcome, in sorted key order.
    """
    if config.partition != partition_set.partition:
        raise InvalidParameterError(f"Config adapts {config.partition.value} partitions but the partition set holds {partition_set.partition.value}.")
    keys = partition_set.keys()
    for key in keys:
        for position in config.positions:
            insert_affine(m, position, slot_key(partition_set.partition, key), config.activation)

    def run(key):
        members = partition_set.members(key)
        prior_keys = ()
        if prior:
            prior_keys = prior[members[0]]
            if any(prior[u] != prior_keys for u in members):
                raise AdaptationError(f"Utterances of '{key}' were adapted under different earlier transforms; cascading needs nested partitions.")
        return adapt_partition(m, key, {u: features[u] for u in members}, pseudo_targets, config, ivectors, prior_keys)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            outcomes = list(executor.map(run, keys))
    else:
        outcomes = [run(key) for key in keys]
    return dict(zip(keys, outcomes))


def frame_error_report(predictions, gold, partition_set: PartitionSet = None):
    """Count frame errors overall and per partition.

    Parameters:
    predictions (dict): utterance id -> predicted labels.
    gold (dict): utterance id -> reference labels.
    partition_set (PartitionSet, optional): Groups utterances; without it everything is one "all" group.

    Returns:
    FerReport
    """
    rows = {}
    for utt_id, predicted in predictions.items():
        reference = np.asarray(gold[utt_id]).ravel()
        predicted = np.asarray(predicted).ravel()
        if predicted.size != reference.size:
            raise DataError(f"'{utt_id}' has {predicted.size} predicted frames but {reference.size} reference labels.")
        key = partition_set.mapping[utt_id] if partition_set else "all"
        errors, frames = rows.get(key, (0, 0))
        rows[key] = (errors + int(np.sum(predicted != reference)), frames + reference.size)

    table = pd.DataFrame.from_dict(rows, orient="index", columns=["Errors", "Frames"]).sort_index()
    table["FER"] = table["Errors"] / table["Frames"]
    table.index.name = "Partition"
    table.columns.name = "Name"
    total_frames = int(table["Frames"].sum())
    overall = float(table["Errors"].sum() / total_frames) if total_frames else 0.0
    return FerReport(overall, table)


def _with_transforms(m: BlstmAcousticModel, transforms):
    """A view of m sharing its base parameters, with exactly the given transforms slotted in."""
    slots = {}
    for transform_list in transforms.values():
        for transform in transform_list:
            slots[(transform.position, transform.partition_key)] = transform
    return BlstmAcousticModel(m.input_dim, m.ivector_dim, m.layer_sizes, m.output_dim, m.params, slots, m.training_log)


def evaluate(m: BlstmAcousticModel, features, labels, ivectors=None, partition_set: PartitionSet = None, transforms=None,
             prior_stages=(), group_by: PartitionSet = None):
    """Frame error rate of a model on a data set, with or without adapted transforms.

    Parameters:
    m (BlstmAcousticModel)
    features (dict): utterance id -> FeatureMatrix.
    labels (dict): utterance id -> gold labels.
    ivectors (dict, optional)
    partition_set (PartitionSet, optional): Groups the report, and picks each utterance's transforms.
    transforms (dict, optional): partition key -> list of AffineTransform. Every key of partition_set must be covered.
    prior_stages (sequence of (PartitionSet, transforms dict), optional): Earlier cascaded stages kept active.
    group_by (PartitionSet, optional): Groups the report instead of partition_set, e.g. by environment during speaker adaptation.

    Returns:
    FerReport
    """
    stages = list(prior_stages)
    if transforms is not None:
        if partition_set is None:
            raise InvalidParameterError("Adapted evaluation needs the partition set the transforms belong to.")
        stages.append((partition_set, transforms))
    merged = {}
    for stage_set, stage_transforms in stages:
        missing = sorted(set(stage_set.mapping[u] for u in features) - set(stage_transforms))
        if missing:
            raise UncoveredPartitionError(f"No adapted transforms for partition(s) {missing}.")
        merged.update({(stage_set.partition, key): value for key, value in stage_transforms.items()})

    view = _with_transforms(m, merged) if stages else m
    predictions = {}
    for utt_id, f in features.items():
        active = tuple(slot_key(stage_set.partition, stage_set.mapping[utt_id]) for stage_set, _ in stages)
        predictions[utt_id] = predict_labels(view, f, _lookup_ivector(ivectors, utt_id), active)
    return frame_error_report(predictions, labels, group_by or partition_set)
