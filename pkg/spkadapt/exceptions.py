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

# User-directed exceptions
class SpkadaptError(Exception):
    """Base class for all exceptions we'll raise."""
    pass

class InvalidParameterError(SpkadaptError):
    """Invalid parameter."""
    pass

class ConfigError(InvalidParameterError):
    """Problem with an experiment configuration file or flag."""
    pass

class DataError(SpkadaptError):
    """Something was wrong with the data."""
    pass

class NonFiniteDataError(DataError):
    """Input contained NaN or infinite values."""
    pass

class DimensionMismatchError(DataError):
    """Array dimensions did not agree."""
    pass

class DegenerateDataError(DataError):
    """The data cannot support the requested estimate (e.g. a single class, no frames)."""
    pass

class NoSpeechError(DegenerateDataError):
    """Every frame of an utterance was masked out as non-speech."""
    pass

class UbmMismatchError(DataError):
    """Statistics were accumulated with a different UBM than the model expects."""
    pass

class FileError(SpkadaptError):
    """Base class for file-related errors. Subclasses carry a stable error code."""
    code = "file"

class MissingFileError(FileError):
    """A file was missing."""
    code = "missing-file"

class ArchiveError(FileError):
    """Base class for feature archive errors."""
    code = "archive"

class BadMagicError(ArchiveError):
    """The file does not start with the expected magic bytes."""
    code = "bad-magic"

class VersionMismatchError(ArchiveError):
    """The file was written with a format version we can't read."""
    code = "version-mismatch"

class TruncatedRecordError(ArchiveError):
    """The file ended in the middle of a record."""
    code = "truncated-record"

class DuplicateIdError(ArchiveError):
    """The same id was written twice."""
    code = "duplicate-id"

class ManifestError(FileError):
    """Base class for dataset manifest errors."""
    code = "manifest"

class MalformedLineError(ManifestError):
    """A manifest line did not have the expected fields."""
    code = "malformed-line"

class DanglingReferenceError(ManifestError):
    """A manifest record refers to an archive or id that doesn't exist."""
    code = "dangling-reference"

class DuplicateUtteranceError(ManifestError):
    """A manifest lists the same utterance id twice."""
    code = "duplicate-utterance"

class ContainerError(FileError):
    """Base class for model container errors."""
    code = "container"

class ContainerMagicError(ContainerError):
    """The file is not a model container."""
    code = "container-magic"

class ChecksumMismatchError(ContainerError):
    """A model container failed its checksum."""
    code = "checksum-mismatch"

class KindMismatchError(ContainerError):
    """The container holds a different kind of model than was requested."""
    code = "kind-mismatch"

class UnsupportedVersionError(ContainerError):
    """The container was written with an unsupported format version."""
    code = "unsupported-version"

class TrainingError(SpkadaptError):
    """Model training could not proceed."""
    pass

class AdaptationError(SpkadaptError):
    """Base class for adaptation errors."""
    pass

class MissingSlotError(AdaptationError):
    """An affine transform slot required for adaptation was never inserted."""
    pass

class DuplicateSlotError(AdaptationError):
    """An affine transform was already inserted at that position for that partition."""
    pass

class UncoveredPartitionError(AdaptationError):
    """A partition in the dataset has no adapted transforms."""
    pass

class PipelineStageError(SpkadaptError):
    """A pipeline stage failed. The message starts with the stage label."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")

# Warnings
class SpkadaptWarning(UserWarning):
    """Base class for all warnings we'll generate."""
    pass

class SingularScatterWarning(SpkadaptWarning):
    """A scatter or covariance matrix was singular and got regularized."""
    pass

class EmptyComponentWarning(SpkadaptWarning):
    """A mixture component lost all of its frames and was re-split."""
    pass

class NoCrossValidationWarning(SpkadaptWarning):
    """A partition was too small to hold out cross-validation data."""
    pass

class ParameterWarning(SpkadaptWarning):
    """We should warn them about a parameter for some reason."""
    pass

# Developer-directed exceptions
class SpkadaptDevError(Exception):
    """For exceptions that are probably the developer's fault."""
    pass
