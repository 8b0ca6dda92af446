import os

import numpy as np
import pytest

from spkadapt import load_model, save_model
from spkadapt.exceptions import (BadMagicError, ChecksumMismatchError, ContainerMagicError, DuplicateIdError,
                                 KindMismatchError, MissingFileError, NonFiniteDataError, TruncatedRecordError,
                                 UnsupportedVersionError, VersionMismatchError)
from spkadapt.features import LdaTransform
from spkadapt.models.acoustic import TrainConfig, insert_affine, train_model
from spkadapt.models.gmm import DiagonalGmm, fit_gmm, train_vad
from spkadapt.models.ivector import TotalVariabilityModel, fit_rg
from spkadapt.tools.archive_tools import read_archive, write_archive
from spkadapt.tools.container_tools import read_container
from spkadapt.tools.file_tools import atomic_write

from .utils import random_features, small_model


def _gmm():
    return fit_gmm(np.random.default_rng(0).standard_normal((200, 3)), 2, iterations=3)

def _acoustic_model():
    m = small_model()
    data = [(random_features(f"u{i}", seed=i), None, np.arange(12) % 4) for i in range(3)]
    m, _ = train_model(m, data[:2], data[2:], TrainConfig(max_epochs=2, initial_lr=0.01))
    insert_affine(m, 0, "clean")
    insert_affine(m, 2, "spk001", "sigmoid")
    return m

def _models():
    rng = np.random.default_rng(1)
    ubm = _gmm()
    return {
        "GMM": ubm,
        "VAD": train_vad(rng.normal(3.0, 1.0, (100, 3)), rng.normal(0.0, 1.0, (100, 3)), components=2, iterations=2),
        "TV": TotalVariabilityModel(ubm, rng.standard_normal((6, 2)), history=[1.0, 2.0]),
        "LDA": LdaTransform(rng.standard_normal((2, 9)), 5, input_context=3),
        "RG": fit_rg(rng.standard_normal((40, 4))),
        "AM": _acoustic_model(),
    }

def _assert_same_payload(first, second):
    first_meta, first_arrays = first.to_payload()
    second_meta, second_arrays = second.to_payload()
    assert first_meta == second_meta
    assert set(first_arrays) == set(second_arrays)
    for name, value in first_arrays.items():
        assert second_arrays[name].dtype == np.asarray(value).dtype, name
        assert np.array_equal(second_arrays[name], value), name

@pytest.mark.parametrize("kind", ["GMM", "VAD", "TV", "LDA", "RG", "AM"])
def test_models_round_trip_exactly(tmp_path, kind):
    model = _models()[kind]
    path = save_model(kind, model, str(tmp_path / f"{kind}.amdl"))
    loaded = load_model(path, kind)
    assert type(loaded) is type(model)
    _assert_same_payload(model, loaded)
    assert read_container(path).kind == kind

def test_loaded_acoustic_model_keeps_slots_and_log(tmp_path):
    model = _acoustic_model()
    loaded = load_model(save_model("AM", model, str(tmp_path / "am.amdl")))
    assert set(loaded.at_slots) == {(0, "clean"), (2, "spk001")}
    assert loaded.at_slots[(0, "clean")].directions == ("fwd",)
    assert loaded.at_slots[(2, "spk001")].activation == "sigmoid"
    assert loaded.fingerprint() == model.fingerprint()
    assert list(loaded.training_log.index) == list(model.training_log.index)
    assert list(loaded.training_log["Layers"]) == list(model.training_log["Layers"])

def test_container_errors(tmp_path):
    models = _models()
    path = save_model("TV", models["TV"], str(tmp_path / "tv.amdl"))
    with pytest.raises(KindMismatchError) as info:
        load_model(path, "GMM")
    assert info.value.code == "kind-mismatch"
    with pytest.raises(KindMismatchError):
        save_model("GMM", models["TV"], str(tmp_path / "other.amdl"))
    with pytest.raises(MissingFileError):
        load_model(str(tmp_path / "absent.amdl"))

    with open(path, "rb") as in_file:
        blob = bytearray(in_file.read())

    corrupted = bytearray(blob)
    corrupted[-20] ^= 0xFF
    corrupted_path = tmp_path / "corrupted.amdl"
    corrupted_path.write_bytes(bytes(corrupted))
    with pytest.raises(ChecksumMismatchError) as info:
        load_model(str(corrupted_path))
    assert info.value.code == "checksum-mismatch"

    future = bytearray(blob)
    future[4:8] = (9).to_bytes(4, "little")
    future_path = tmp_path / "future.amdl"
    future_path.write_bytes(bytes(future))
    with pytest.raises(UnsupportedVersionError) as info:
        load_model(str(future_path))
    assert info.value.code == "unsupported-version"

    short_path = tmp_path / "short.amdl"
    short_path.write_bytes(bytes(blob[:-3]))
    with pytest.raises(TruncatedRecordError):
        load_model(str(short_path))

    foreign = tmp_path / "foreign.amdl"
    foreign.write_bytes(b"RIFF" + bytes(blob[4:]))
    with pytest.raises(ContainerMagicError) as info:
        load_model(str(foreign))
    assert info.value.code == "container-magic"

def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    entries = {"u1": rng.standard_normal((5, 3)), "u2": rng.standard_normal(4)}
    path = str(tmp_path / "feats.farc")
    assert write_archive(entries, path) == 2
    records = read_archive(path)
    assert list(records) == ["u1", "u2"]
    assert records["u1"].dtype == np.float32
    assert np.array_equal(records["u1"], entries["u1"].astype(np.float32))
    assert records["u2"].shape == (1, 4)

    tagged = str(tmp_path / "ivectors.farc")
    write_archive([("u1", entries["u1"]), ("u2", entries["u2"].astype(np.float32))], tagged, version=2)
    records = read_archive(tagged)
    assert records["u1"].dtype == np.float64
    assert np.array_equal(records["u1"], entries["u1"])
    assert records["u2"].dtype == np.float32

def test_archive_errors(tmp_path):
    path = str(tmp_path / "feats.farc")
    with pytest.raises(DuplicateIdError) as info:
        write_archive([("u1", np.zeros((2, 2))), ("u1", np.ones((2, 2)))], path)
    assert info.value.code == "duplicate-id"
    assert not os.path.exists(path)
    with pytest.raises(NonFiniteDataError):
        write_archive({"u1": np.array([[np.nan]])}, path)
    with pytest.raises(VersionMismatchError):
        write_archive({"u1": np.zeros((1, 1))}, path, version=3)

    write_archive({"u1": np.zeros((4, 4)), "u2": np.ones((2, 2))}, path)
    with open(path, "rb") as in_file:
        blob = in_file.read()

    truncated = tmp_path / "truncated.farc"
    truncated.write_bytes(blob[:-5])
    with pytest.raises(TruncatedRecordError) as info:
        read_archive(str(truncated))
    assert info.value.code == "truncated-record"

    wrong = tmp_path / "wrong.farc"
    wrong.write_bytes(b"AMDL" + blob[4:])
    with pytest.raises(BadMagicError) as info:
        read_archive(str(wrong))
    assert info.value.code == "bad-magic"

    newer = tmp_path / "newer.farc"
    newer.write_bytes(blob[:4] + (7).to_bytes(4, "little") + blob[8:])
    with pytest.raises(VersionMismatchError) as info:
        read_archive(str(newer))
    assert info.value.code == "version-mismatch"

    with pytest.raises(MissingFileError):
        read_archive(str(tmp_path / "absent.farc"))

def test_atomic_write(tmp_path):
    path = tmp_path / "out.txt"
    with atomic_write(str(path), "w", encoding="utf-8") as out:
        out.write("first")
    assert path.read_text(encoding="utf-8") == "first"

    with pytest.raises(RuntimeError):
        with atomic_write(str(path), "w", encoding="utf-8") as out:
            out.write("second")
            raise RuntimeError("interrupted")
    # the old content survives and no temporary file is left behind
    assert path.read_text(encoding="utf-8") == "first"
    assert os.listdir(tmp_path) == ["out.txt"]

def test_gmm_loads_as_gmm(tmp_path):
    path = save_model("GMM", _gmm(), str(tmp_path / "ubm.amdl"))
    assert isinstance(load_model(path), DiagonalGmm)
