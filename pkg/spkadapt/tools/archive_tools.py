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
Feature archives hold named matrices: features, i-vectors (1xR) and label
sequences (Tx1). Layout, all integers unsigned 32-bit little-endian:

    "FARC" | version | record count
    per record: id length | id (UTF-8) | rows | cols | [dtype byte, version 2 only] | values row-major

Version 1 stores IEEE-754 single precision. Version 2 adds a dtype byte per
record ('f' single, 'd' double) so i-vectors can keep double precision.
"""

import os
import struct

import numpy as np

from spkadapt.exceptions import (BadMagicError, DuplicateIdError, InvalidParameterError, MissingFileError,
                                 NonFiniteDataError, TruncatedRecordError, VersionMismatchError)
from spkadapt.tools.file_tools import atomic_write

MAGIC = b"FARC"
SINGLE_PRECISION_VERSION = 1
TAGGED_VERSION = 2
_VALUE_TYPES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8")}


def write_archive(entries, path, version=SINGLE_PRECISION_VERSION):
    """Write named matrices to a feature archive.

    Parameters:
    entries (dict or iterable of (str, array)): Record ids and their matrices. 1-D arrays are
        stored as a single row.
    path (str): Destination file, written atomically.
    version (int, optional): 1 for single precision (default), 2 for per-record precision,
        where float64 arrays stay float64.

    Returns:
    int: Number of records written.
    """
    if version not in (SINGLE_PRECISION_VERSION, TAGGED_VERSION):
        raise VersionMismatchError(f"Can't write archive version {version}.")
    items = list(entries.items()) if isinstance(entries, dict) else list(entries)

    seen = set()
    chunks = []
    for utt_id, matrix in items:
        if utt_id in seen:
            raise DuplicateIdError(f"Archive id '{utt_id}' appears more than once.")
        seen.add(utt_id)
        matrix = np.asarray(matrix)
        if matrix.ndim == 1:
            matrix = matrix.reshape(1, -1)
        if matrix.ndim != 2:
            raise InvalidParameterError(f"Archive record '{utt_id}' must be a matrix, got {matrix.ndim} dimensions.")
        if not np.all(np.isfinite(matrix)):
            raise NonFiniteDataError(f"Archive record '{utt_id}' has non-finite values.")

        id_bytes = str(utt_id).encode("utf-8")
        rows, cols = matrix.shape
        chunks.append(struct.pack("<I", len(id_bytes)) + id_bytes + struct.pack("<II", rows, cols))
        if version == SINGLE_PRECISION_VERSION:
            value_type = b"f"
        else:
            value_type = b"d" if matrix.dtype == np.float64 else b"f"
            chunks.append(value_type)
        chunks.append(np.ascontiguousarray(matrix, dtype=_VALUE_TYPES[value_type]).tobytes())

    with atomic_write(path, "wb") as out:
        out.write(MAGIC + struct.pack("<II", version, len(items)))
        for chunk in chunks:
            out.write(chunk)
    return len(items)


def read_archive(path):
    """Read every record of a feature archive.

    Parameters:
    path (str): Archive file.

    Returns:
    dict: Record id -> numpy array, in file order. Single precision records come back as
        float32 so a write/read round trip is bit-exact.
    """
    if not os.path.isfile(path):
        raise MissingFileError(f"Archive {path} does not exist.")
    with open(path, "rb") as in_file:
        blob = in_file.read()

    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path} is not a feature archive (bad magic bytes).")
    reader = _Reader(blob, path)
    version, count = reader.unpack("<II", "header")
    if version not in (SINGLE_PRECISION_VERSION, TAGGED_VERSION):
        raise VersionMismatchError(f"{path} uses archive version {version}; this package reads 1 and 2.")

    entries = {}
    for _ in range(count):
        (id_len,) = reader.unpack("<I", "id length")
        utt_id = reader.take(id_len, "id").decode("utf-8")
        rows, cols = reader.unpack("<II", f"shape of '{utt_id}'")
        if version == TAGGED_VERSION:
            value_type = reader.take(1, f"dtype of '{utt_id}'")
            if value_type not in _VALUE_TYPES:
                raise TruncatedRecordError(f"{path}: record '{utt_id}' has unknown value type {value_type!r}.")
        else:
            value_type = b"f"
        dtype = _VALUE_TYPES[value_type]
        raw = reader.take(rows * cols * dtype.itemsize, f"values of '{utt_id}'")
        if utt_id in entries:
            raise DuplicateIdError(f"{path}: id '{utt_id}' appears more than once.")
        values = np.frombuffer(raw, dtype=dtype).reshape(rows, cols)
        entries[utt_id] = values.astype(values.dtype.newbyteorder("="), copy=True)
    return entries


class _Reader:
    """Cursor over an archive blob that turns short reads into TruncatedRecordError."""

    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 4

    def take(self, size, what):
        end = self.pos + size
        if end > len(self.blob):
            raise TruncatedRecordError(f"{self.path} ended while reading the {what}.")
        chunk = self.blob[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
