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

import warnings

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.stats

from spkadapt.exceptions import InvalidParameterError, ParameterWarning


def _matrix(vectors):
    """Stack IVectors, arrays or a dict of either into an n x R matrix."""
    if isinstance(vectors, dict):
        vectors = list(vectors.values())
    rows = [np.asarray(getattr(v, "values", v), dtype=np.float64).ravel() for v in vectors]
    if not rows:
        raise InvalidParameterError("Need at least one vector.")
    return np.vstack(rows)


def chi_ks_test(vectors, dof=None):
    """Kolmogorov-Smirnov test of vector lengths against a chi distribution.

    Parameters:
    vectors (dict or list): IVectors or arrays, all of dimension R.
    dof (int, optional): Degrees of freedom. Defaults to R.

    Returns:
    tuple: (KS statistic, p-value)
    """
    matrix = _matrix(vectors)
    dof = matrix.shape[1] if dof is None else dof
    result = scipy.stats.kstest(np.linalg.norm(matrix, axis=1), "chi", args=(dof,))
    return float(result.statistic), float(result.pvalue)


def cosine_similarity_gap(ivectors, speakers, quiet=False):
    """Mean within-speaker minus mean across-speaker cosine similarity.

    Parameters:
    ivectors (dict): utterance id -> IVector or array.
    speakers (dict): utterance id -> speaker id.
    quiet (bool, optional): Silence the warning for speakers with a single utterance. Default False.

    Returns:
    pandas.Series: Within, Across and Gap.
    """
    ids = list(ivectors)
    matrix = _matrix([ivectors[i] for i in ids])
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    unit = matrix / np.where(norms > 0, norms, 1.0)
    similarity = unit @ unit.T
    labels = np.array([speakers[i] for i in ids])
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(ids), dtype=bool)

    within_mask = same & off_diagonal
    across_mask = ~same
    if not within_mask.any() or not across_mask.any():
        raise InvalidParameterError("Need at least two utterances of one speaker and at least two speakers.")
    if not quiet:
        counts = pd.Series(labels).value_counts()
        if (counts < 2).any():
            warnings.warn(f"{int((counts < 2).sum())} speaker(s) have a single utterance and add no within-speaker pairs.", ParameterWarning, stacklevel=2)

    within = float(similarity[within_mask].mean())
    across = float(similarity[across_mask].mean())
    return pd.Series({"Within": within, "Across": across, "Gap": within - across}, name="Cosine_Similarity")


def principal_angles(a, b, degrees=True):
    """Principal angles between the column spaces of a and b, largest first."""
    angles = scipy.linalg.subspace_angles(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.degrees(angles) if degrees else angles


def relative_reduction(before, after):
    """Relative error reduction (before - after) / before; 0 when before is 0."""
    return 0.0 if before == 0 else (before - after) / before