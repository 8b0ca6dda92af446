import warnings

import spkadapt
from spkadapt import exceptions
from spkadapt.exceptions import (AdaptationError, ConfigError, DataError, FileError, InvalidParameterError,
                                 PipelineStageError, SpkadaptError, SpkadaptWarning)

def test_error_hierarchy():
    """Test that callers can catch errors by family"""
    # Every package error is a SpkadaptError
    for name in ("ConfigError", "NoSpeechError", "UbmMismatchError", "TruncatedRecordError", "DanglingReferenceError",
                 "ChecksumMismatchError", "UncoveredPartitionError", "TrainingError", "PipelineStageError"):
        assert issubclass(getattr(exceptions, name), SpkadaptError), name

    # Config problems are parameter problems
    assert issubclass(ConfigError, InvalidParameterError)
    assert issubclass(exceptions.NoSpeechError, exceptions.DegenerateDataError)
    assert issubclass(exceptions.DegenerateDataError, DataError)
    assert issubclass(exceptions.MissingSlotError, AdaptationError)

    # Developer errors stay outside the user-facing family
    assert not issubclass(exceptions.SpkadaptDevError, SpkadaptError)
    assert issubclass(exceptions.SingularScatterWarning, SpkadaptWarning)

def test_file_error_codes():
    """Test that every file error carries a stable, distinct code"""
    codes = {
        "MissingFileError": "missing-file",
        "BadMagicError": "bad-magic",
        "VersionMismatchError": "version-mismatch",
        "TruncatedRecordError": "truncated-record",
        "DuplicateIdError": "duplicate-id",
        "MalformedLineError": "malformed-line",
        "DanglingReferenceError": "dangling-reference",
        "DuplicateUtteranceError": "duplicate-utterance",
        "ContainerMagicError": "container-magic",
        "ChecksumMismatchError": "checksum-mismatch",
        "KindMismatchError": "kind-mismatch",
        "UnsupportedVersionError": "unsupported-version",
    }
    for name, code in codes.items():
        error = getattr(exceptions, name)("message")
        assert isinstance(error, FileError)
        assert error.code == code
        assert str(error) == "message"

def test_pipeline_stage_error():
    error = PipelineStageError("tv", "T matrix went singular")
    assert error.stage == "tv"
    assert str(error) == "[tv] T matrix went singular"

def test_pretty_exception_hook(capsys):
    """Test that package errors print as one line and others fall through"""
    try:
        raise DataError("no frames left")
    except DataError as e:
        spkadapt._exception_handler(type(e), e, e.__traceback__)
    err = capsys.readouterr().err
    assert err.startswith("spkadapt error: no frames left (")
    assert "line" in err

    seen = []
    try:
        raise KeyError("other")
    except KeyError as e:
        spkadapt._exception_handler(type(e), e, e.__traceback__, default_hook=lambda *args: seen.append(args[0]))
    assert seen == [KeyError]

def test_pretty_warnings(capsys):
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.showwarning = spkadapt._warning_displayer
        warnings.warn("scatter regularized", exceptions.SingularScatterWarning)
    assert "spkadapt warning: scatter regularized" in capsys.readouterr().err
