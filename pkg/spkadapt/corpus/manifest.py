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
Dataset manifests: UTF-8 text, one utterance per line, five TAB-separated fields

    utterance_id  speaker_id  environment_id  feature archive path  label archive path

Lines starting with "#" and blank lines are skipped. Relative archive paths are resolved
against the manifest's directory. A feature path ending in .wav points at audio instead
of an archive.
"""

import logging
import os

import numpy as np
import pandas as pd

from spkadapt.exceptions import (DanglingReferenceError, DuplicateUtteranceError, MalformedLineError, MissingFileError)
from spkadapt.features.frontend import FeatureMatrix, FrontendConfig, compute_features, read_wav
from spkadapt.tools.archive_tools import read_archive
from spkadapt.tools.file_tools import atomic_write

logger = logging.getLogger(__name__)

INDEX_NAME = "Utterance_ID"
COLUMNS = ["Speaker_ID", "Environment_ID", "Feature_Path", "Label_Path"]


def _standardize(df):
    df.index.name = INDEX_NAME
    df.columns.name = "Name"
    return df


class DatasetManifest:
    """
    The utterances of one data set and where their features and labels live.

    Attributes:
        records (pandas.DataFrame): Indexed by Utterance_ID, columns Speaker_ID, Environment_ID,
            Feature_Path and Label_Path (absolute paths).
    """

    def __init__(self, records: pd.DataFrame):
        if records.index.has_duplicates:
            duplicate = records.index[records.index.duplicated()][0]
            raise DuplicateUtteranceError(f"Utterance id '{duplicate}' appears more than once in the manifest.")
        self.records = _standardize(records[COLUMNS].copy())
        self._archives = {}

    def __len__(self):
        return len(self.records)

    @property
    def utterance_ids(self):
        return list(self.records.index)

    def speakers(self):
        return dict(self.records["Speaker_ID"])

    def environments(self):
        return dict(self.records["Environment_ID"])

    def _archive(self, path):
        if path not in self._archives:
            self._archives[path] = read_archive(path)
        return self._archives[path]

    def load_features(self, frontend: FrontendConfig = None, feature_kind=None):
        """Utterance id -> FeatureMatrix, in manifest order. WAV entries go through `frontend`."""
        features = {}
        for utt_id, path in self.records["Feature_Path"].items():
            if path.lower().endswith(".wav"):
                samples, rate = read_wav(path)
                features[utt_id] = compute_features(samples, rate, frontend or FrontendConfig(), utterance_id=utt_id)
            else:
                kwargs = {"feature_kind": feature_kind} if feature_kind is not None else {}
                features[utt_id] = FeatureMatrix(utt_id, self._archive(path)[utt_id], **kwargs)
        return features

    def load_labels(self):
        """Utterance id -> integer label sequence, in manifest order."""
        return {utt_id: np.rint(self._archive(path)[utt_id]).astype(np.int64).ravel()
                for utt_id, path in self.records["Label_Path"].items()}

    def validate(self):
        """Check that every referenced archive exists and holds the utterance."""
        for column in ("Feature_Path", "Label_Path"):
            for utt_id, path in self.records[column].items():
                if not os.path.isfile(path):
                    raise DanglingReferenceError(f"'{utt_id}' references {path}, which does not exist.")
                if column == "Feature_Path" and path.lower().endswith(".wav"):
                    continue
                if utt_id not in self._archive(path):
                    raise DanglingReferenceError(f"'{utt_id}' is not in the archive {path}.")
        return self


def load_manifest(path, validate=True) -> DatasetManifest:
    """Read and validate a manifest file.

    Parameters:
    path (str): Manifest file.
    validate (bool, optional): Check referenced archives for existence and id coverage. Default True.

    Returns:
    DatasetManifest
    """
    if not os.path.isfile(path):
        raise MissingFileError(f"Manifest {path} does not exist.")
    base = os.path.dirname(os.path.abspath(path))
    rows = {}
    with open(path, encoding="utf-8") as in_file:
        for line_number, line in enumerate(in_file, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5 or not all(fields):
                raise MalformedLineError(f"{path}, line {line_number}: expected 5 TAB-separated fields, found {len(fields)}.")
            utt_id, speaker, environment, feature_path, label_path = fields
            if utt_id in rows:
                raise DuplicateUtteranceError(f"{path}, line {line_number}: utterance id '{utt_id}' appears more than once.")
            rows[utt_id] = [speaker, environment, os.path.join(base, feature_path), os.path.join(base, label_path)]

    records = pd.DataFrame.from_dict(rows, orient="index", columns=COLUMNS)
    manifest = DatasetManifest(records)
    logger.debug("Loaded manifest %s with %d utterances", path, len(manifest))
    return manifest.validate() if validate else manifest


def write_manifest(manifest: DatasetManifest, path):
    """Write a manifest with archive paths relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    with atomic_write(path, "w", encoding="utf-8") as out:
        out.write("# utterance_id\tspeaker_id\tenvironment_id\tfeatures\tlabels\n")
        for utt_id, row in manifest.records.iterrows():
            feature_path = os.path.relpath(row["Feature_Path"], base)
            label_path = os.path.relpath(row["Label_Path"], base)
            out.write(f"{utt_id}\t{row['Speaker_ID']}\t{row['Environment_ID']}\t{feature_path}\t{label_path}\n")
    return path
