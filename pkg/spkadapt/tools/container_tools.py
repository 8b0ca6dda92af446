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

import json
import os
import struct
from dataclasses import dataclass
from hashlib import blake2b

import numpy as np

from spkadapt.exceptions import (ChecksumMismatchError, ContainerMagicError, InvalidParameterError,
                                 KindMismatchError, MissingFileError, TruncatedRecordError,
                                 UnsupportedVersionError)
from spkadapt.models.model import Model
from spkadapt.tools.file_tools import atomic_write

MAGIC = b"AMDL"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
CHECKSUM_BYTES = 8

# Every array is stored little-endian whatever the platform
_DTYPES = {
    "f8": np.dtype("<f8"),
    "f4": np.dtype("<f4"),
    "i8": np.dtype("<i8"),
    "b1": np.dtype("|b1"),
}


@dataclass(frozen=True)
class ModelContainer:
    """A model container as it sits on disk: magic, version, kind tag, payload, checksum."""
    kind: str
    version: int
    payload: bytes
    checksum: int


def checksum64(blob: bytes) -> int:
    """64-bit checksum of a byte string."""
    return int.from_bytes(blake2b(blob, digest_size=CHECKSUM_BYTES).digest(), "little")


def encode_payload(meta: dict, arrays: dict) -> bytes:
    """Serialize metadata plus named arrays.

    Layout: header length (u32 LE), UTF-8 JSON header (sorted keys) listing each array's
    name, dtype code, shape and byte offset, then the raw array bytes back to back.
    """
    table = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _dtype_code(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode_payload(blob: bytes):
    """Inverse of encode_payload.

    Returns:
    tuple: (meta dict, dict of name -> numpy array)
    """
    if len(blob) < 4:
        raise TruncatedRecordError("Model payload is too short to hold a header.")
    (header_len,) = struct.unpack_from("<I", blob, 0)
    body_start = 4 + header_len
    if len(blob) < body_start:
        raise TruncatedRecordError("Model payload header is truncated.")
    header = json.loads(blob[4:body_start].decode("utf-8"))
    arrays = {}
    for entry in header["arrays"]:
        start = body_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise TruncatedRecordError(f"Array '{entry['name']}' runs past the end of the payload.")
        arr = np.frombuffer(blob[start:end], dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        # Native byte order and writeable, so loaded models can be trained further
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header["meta"], arrays


def save_model(kind: str, model: Model, path: str) -> str:
    """Write a model to a versioned, checksummed container file.

    Parameters:
    kind (str): Container kind tag. Must match the model's own kind.
    model (Model): Any model object (GMM, VAD, TV, LDA, RG, AM).
    path (str): Destination file. Written atomically.

    Returns:
    str: The path written.
    """
    if not isinstance(model, Model):
        raise InvalidParameterError(f"Can't save a {type(model).__name__}; it isn't a model.")
    if model.kind != kind:
        raise KindMismatchError(f"Asked to save a {kind} container but the payload is a {model.kind} model.")
    meta, arrays = model.to_payload()
    payload = encode_payload(meta, arrays)
    kind_bytes = kind.encode("ascii")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(kind_bytes)) + kind_bytes + struct.pack("<Q", len(payload)) + payload
    with atomic_write(path, "wb") as out:
        out.write(body)
        out.write(struct.pack("<Q", checksum64(body)))
    return path


def read_container(path: str) -> ModelContainer:
    """Read and verify a container without decoding its payload."""
    if not os.path.isfile(path):
        raise MissingFileError(f"Model file {path} does not exist.")
    with open(path, "rb") as in_file:
        blob = in_file.read()

    if blob[:4] != MAGIC:
        raise ContainerMagicError(f"{path} is not a model container (bad magic bytes).")
    if len(blob) < 12:
        raise TruncatedRecordError(f"{path} is truncated.")
    version, kind_len = struct.unpack_from("<II", blob, 4)
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(f"{path} uses container version {version}; this package reads {SUPPORTED_VERSIONS}.")
    kind_end = 12 + kind_len
    if len(blob) < kind_end + 8 + CHECKSUM_BYTES:
        raise TruncatedRecordError(f"{path} is truncated.")
    kind = blob[12:kind_end].decode("ascii", errors="replace")
    (payload_len,) = struct.unpack_from("<Q", blob, kind_end)
    payload_start = kind_end + 8
    body_end = payload_start + payload_len
    if len(blob) != body_end + CHECKSUM_BYTES:
        raise TruncatedRecordError(f"{path} has {len(blob)} bytes but its header promises {body_end + CHECKSUM_BYTES}.")

    (stored,) = struct.unpack_from("<Q", blob, body_end)
    if checksum64(blob[:body_end]) != stored:
        raise ChecksumMismatchError(f"{path} failed its checksum; the file is corrupted.")
    return ModelContainer(kind=kind, version=version, payload=blob[payload_start:body_end], checksum=stored)


def load_model(path: str, kind: str = None) -> Model:
    """Load a model from a container, checking the checksum and (optionally) the kind.

    Parameters:
    path (str): Container file.
    kind (str, optional): Expected kind tag. A different kind raises KindMismatchError.

    Returns:
    Model: The decoded model.
    """
    container = read_container(path)
    if kind is not None and container.kind != kind:
        raise KindMismatchError(f"{path} holds a {container.kind} model, not a {kind} model.")
    meta, arrays = decode_payload(container.payload)
    return Model.class_for_kind(container.kind).from_payload(meta, arrays)


def _dtype_code(dtype):
    if dtype == np.bool_:
        return "b1"
    if np.issubdtype(dtype, np.integer):
        return "i8"
    if dtype == np.float32:
        return "f4"
    if np.issubdtype(dtype, np.floating):
        return "f8"
    raise InvalidParameterError(f"Arrays of dtype {dtype} can't go in a model container.")
