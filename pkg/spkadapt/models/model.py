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

from hashlib import md5

import numpy as np

from spkadapt.exceptions import KindMismatchError, SpkadaptDevError


def array_fingerprint(*arrays) -> str:
    """Hash the exact bytes, shapes and dtypes of a sequence of arrays.

    Returns:
    str: Hex digest. Equal digests mean bit-identical arrays.
    """
    digest = md5()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.dtype.str).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


class Model:
    """
    The Model class is the base class for everything we persist in a model container.

    Each child class names its container kind tag in the `kind` class attribute and
    says how to turn itself into a payload and back. The payload is a pair of a small
    JSON-able metadata dict and a dict of named numpy arrays, so the container code never
    has to know what a GMM or a BLSTM is.

    Attributes:
        kind (str): Container kind tag, one of GMM, VAD, TV, LDA, RG, AM.
    """

    kind = None
    _registry = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.kind is not None:
            if cls.kind in Model._registry and Model._registry[cls.kind] is not cls:
                raise SpkadaptDevError(f"Two model classes claim the container kind {cls.kind}.")
            Model._registry[cls.kind] = cls

    def to_payload(self):
        """Split the model into (metadata dict, dict of named arrays)."""
        raise NotImplementedError

    @classmethod
    def from_payload(cls, meta, arrays):
        """Rebuild a model from the output of to_payload."""
        raise NotImplementedError

    @staticmethod
    def class_for_kind(kind):
        """Look up the model class registered for a container kind tag.

        Parameters:
        kind (str): The kind tag read from a container.

        Returns:
        type: The Model subclass.
        """
        try:
            return Model._registry[kind]
        except KeyError:
            raise KindMismatchError(f"No model class handles container kind '{kind}'. Known kinds are {sorted(Model._registry)}.") from None

    @staticmethod
    def known_kinds():
        return sorted(Model._registry)

    @staticmethod
    def _nested_arrays(prefix, arrays):
        """Pull the arrays stored under `prefix/` back out, with the prefix stripped."""
        cut = len(prefix) + 1
        return {name[cut:]: arr for name, arr in arrays.items() if name.startswith(prefix + "/")}
