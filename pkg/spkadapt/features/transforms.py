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
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from spkadapt.exceptions import (DataError, DegenerateDataError, DimensionMismatchError, InvalidParameterError,
                                 SingularScatterWarning)
from spkadapt.features.frontend import FeatureKind, FeatureMatrix, Frontend
from spkadapt.models.model import Model

logger = logging.getLogger(__name__)

DELTA_WINDOW = 2
CMVN_VARIANCE_FLOOR = 1e-8
SCATTER_REGULARIZATION = 1e-6

_DERIVED_KIND = {
    FeatureKind.GT: FeatureKind.GT_DERIV,
    FeatureKind.MFCC: FeatureKind.MFCC_DERIV,
}
_LDA_KIND = {
    FeatureKind.GT: FeatureKind.GT_CONTEXT_LDA,
    FeatureKind.GT_DERIV: FeatureKind.GT_CONTEXT_LDA,
    FeatureKind.GT_CONTEXT_LDA: FeatureKind.GT_CONTEXT_LDA,
    FeatureKind.MFCC: FeatureKind.MFCC_CONTEXT_LDA,
    FeatureKind.MFCC_DERIV: FeatureKind.MFCC_CONTEXT_LDA,
    FeatureKind.MFCC_CONTEXT_LDA: FeatureKind.MFCC_CONTEXT_LDA,
}


def _deltas(frames, window):
    """Regression deltas: d_t = sum_n n (c_{t+n} - c_{t-n}) / (2 sum_n n^2), edges replicated."""
    num_frames = frames.shape[0]
    padded = np.pad(frames, ((window, window), (0, 0)), mode="edge")
    numerator = np.zeros_like(frames)
    for n in range(1, window + 1):
        numerator += n * (padded[window + n:window + n + num_frames] - padded[window - n:window - n + num_frames])
    return numerator / (2.0 * sum(n * n for n in range(1, window + 1)))


def append_derivatives(f: FeatureMatrix, order=2, window=DELTA_WINDOW) -> FeatureMatrix:
    """Append first (and second) order regression deltas to every frame.

    Parameters:
    f (FeatureMatrix): Static features.
    order (int): 1 for [c, delta], 2 for [c, delta, delta-delta].
    window (int, optional): Frames on each side of the regression window. Default 2.

    Returns:
    FeatureMatrix: T x (order + 1) * D.
    """
    if order not in (1, 2):
        raise InvalidParameterError(f"Derivative order must be 1 or 2, got {order}.")
    if f.num_frames < 2 * window + 1:
        raise DataError(f"'{f.utterance_id}' has {f.num_frames} frames; deltas need at least {2 * window + 1}.")
    blocks = [f.frames, _deltas(f.frames, window)]
    if order == 2:
        blocks.append(_deltas(blocks[1], window))
    return f.with_frames(np.hstack(blocks), _DERIVED_KIND.get(f.feature_kind, f.feature_kind))


def splice_context(f: FeatureMatrix, left, right) -> FeatureMatrix:
    """Stack each frame with `left` preceding and `right` following frames (edges replicated)."""
    if left < 0 or right < 0:
        raise InvalidParameterError(f"Context must be non-negative, got left={left}, right={right}.")
    if left == 0 and right == 0:
        return f
    num_frames = f.num_frames
    padded = np.pad(f.frames, ((left, right), (0, 0)), mode="edge")
    spliced = np.hstack([padded[offset:offset + num_frames] for offset in range(left + right + 1)])
    return f.with_frames(spliced)


class LdaTransform(Model):
    """A d_out x d_in LDA projection fitted on spliced frames.

    Attributes:
        projection (numpy.ndarray): Rows are discriminant directions, by decreasing eigenvalue.
        class_count (int): Number of classes seen at fit time.
        input_context (int): Width in frames of the spliced input the projection expects.
    """

    kind = "LDA"

    def __init__(self, projection, class_count, input_context=1):
        projection = np.asarray(projection, dtype=np.float64)
        if projection.ndim != 2 or not np.all(np.isfinite(projection)):
            raise DataError("An LDA projection must be a finite 2-D matrix.")
        if input_context < 1 or input_context % 2 == 0:
            raise InvalidParameterError(f"input_context must be an odd positive frame count, got {input_context}.")
        self.projection = projection
        self.class_count = int(class_count)
        self.input_context = int(input_context)

    @property
    def d_in(self):
        return self.projection.shape[1]

    @property
    def d_out(self):
        return self.projection.shape[0]

    def to_payload(self):
        return {"class_count": self.class_count, "input_context": self.input_context}, {"projection": self.projection}

    @classmethod
    def from_payload(cls, meta, arrays):
        return cls(arrays["projection"], meta["class_count"], meta["input_context"])


def fit_lda(frames, labels, d_out, input_context=1) -> LdaTransform:
    """Fit an LDA projection maximizing between-class over within-class scatter.

    Parameters:
    frames (array-like): N x d_in training frames.
    labels (array-like): N class ids.
    d_out (int): Output dimension, at most d_in.
    input_context (int, optional): Splice width the frames were built with; stored with the transform.

    Returns:
    LdaTransform
    """
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if frames.ndim != 2 or labels.shape[0] != frames.shape[0]:
        raise DimensionMismatchError(f"Got {labels.shape[0]} labels for {frames.shape[0]} frames.")
    num_frames, d_in = frames.shape
    if not 1 <= d_out <= d_in:
        raise InvalidParameterError(f"LDA output dimension must be between 1 and the input dimension {d_in}, got {d_out}.")
    classes = np.unique(labels)
    if classes.size < 2:
        raise DegenerateDataError("LDA needs at least 2 classes; every frame has the same label.")
    if num_frames <= d_in:
        raise DegenerateDataError(f"LDA needs more frames than dimensions ({num_frames} frames, {d_in} dimensions).")

    grand_mean = frames.mean(axis=0)
    within = np.zeros((d_in, d_in))
    between = np.zeros((d_in, d_in))
    for label in classes:
        members = frames[labels == label]
        class_mean = members.mean(axis=0)
        centered = members - class_mean
        within += centered.T @ centered
        offset = class_mean - grand_mean
        between += members.shape[0] * np.outer(offset, offset)

    eigvals = np.linalg.eigvalsh(within)
    if eigvals[0] <= 1e-10 * max(eigvals[-1], np.finfo(float).tiny):
        epsilon = max(SCATTER_REGULARIZATION * np.trace(within) / d_in, np.finfo(float).eps)
        warnings.warn(f"Within-class scatter is singular; adding {epsilon:.3g} * I before solving.", SingularScatterWarning, stacklevel=2)
        within = within + epsilon * np.eye(d_in)

    values, vectors = scipy.linalg.eigh(between, within)
    order = np.argsort(-values, kind="stable")[:d_out]
    projection = vectors[:, order].T
    for row in projection:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    logger.debug("Fitted LDA %d -> %d on %d frames, %d classes", d_in, d_out, num_frames, classes.size)
    return LdaTransform(projection, classes.size, input_context)


def apply_transform(f: FeatureMatrix, lda: LdaTransform) -> FeatureMatrix:
    if f.dim != lda.d_in:
        raise DimensionMismatchError(f"'{f.utterance_id}' has dimension {f.dim} but the LDA expects {lda.d_in}.")
    return f.with_frames(f.frames @ lda.projection.T, _LDA_KIND.get(f.feature_kind, f.feature_kind))


def cmvn(f: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance mean and variance normalization."""
    if f.num_frames < 2:
        raise DataError(f"CMVN needs at least 2 frames; '{f.utterance_id}' has {f.num_frames}.")
    mean = f.frames.mean(axis=0)
    variance = np.maximum(f.frames.var(axis=0), CMVN_VARIANCE_FLOOR)
    return f.with_frames((f.frames - mean) / np.sqrt(variance))


@dataclass(frozen=True)
class UbmPathway:
    """One of the UBM feature pathways: a frontend, optional deltas, optional context + LDA.

    Attributes:
        frontend (Frontend): MEL_MFCC or ERB_GT.
        derivatives (int): 0 (none), 1 or 2.
        context (int): Frames of context on each side before LDA; 0 for none.
        lda_dim (int): LDA output dimension; 0 for no LDA.
    """
    frontend: Frontend = Frontend.ERB_GT
    derivatives: int = 0
    context: int = 0
    lda_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frontend", Frontend(self.frontend))
        if self.derivatives not in (0, 1, 2):
            raise InvalidParameterError(f"derivatives must be 0, 1 or 2, got {self.derivatives}.")
        if self.context < 0 or self.lda_dim < 0:
            raise InvalidParameterError("context and lda_dim must be non-negative.")

    @property
    def label(self):
        name = "GT" if self.frontend == Frontend.ERB_GT else "MFCC"
        if self.derivatives:
            name += " +derivatives"
        if self.context and self.lda_dim:
            name += " +context+LDA"
        elif self.context:
            name += " +context"
        elif self.lda_dim:
            name += " +LDA"
        return name

    @property
    def needs_lda(self):
        return self.lda_dim > 0

    def expand(self, f: FeatureMatrix) -> FeatureMatrix:
        """Everything before the LDA: deltas, then splicing."""
        if self.derivatives:
            f = append_derivatives(f, self.derivatives)
        return splice_context(f, self.context, self.context)

    def fit(self, features, labels):
        """Fit the pathway's LDA on expanded training frames; None when the pathway has no LDA."""
        if not self.needs_lda:
            return None
        expanded = [self.expand(f).frames for f in features]
        return fit_lda(np.vstack(expanded), np.concatenate([np.asarray(l).ravel() for l in labels]),
                       self.lda_dim, input_context=2 * self.context + 1)


def ubm_pipeline(pathway: UbmPathway, f: FeatureMatrix, lda: LdaTransform = None) -> FeatureMatrix:
    """Turn static frontend features into the features a pathway's UBM is trained on.

    Parameters:
    pathway (UbmPathway): Which pathway to build.
    f (FeatureMatrix): Static MFCC or GT features.
    lda (LdaTransform, optional): Required when the pathway has an LDA step (see UbmPathway.fit).

    Returns:
    FeatureMatrix
    """
    expanded = pathway.expand(f)
    if not pathway.needs_lda:
        return expanded
    if lda is None:
        raise InvalidParameterError(f"The '{pathway.label}' pathway needs a fitted LDA transform.")
    return apply_transform(expanded, lda)


# The six pathways of the UBM feature comparison, in report order
UBM_PATHWAYS = (
    UbmPathway(Frontend.MEL_MFCC),
    UbmPathway(Frontend.MEL_MFCC, derivatives=2),
    UbmPathway(Frontend.MEL_MFCC, context=4, lda_dim=60),
    UbmPathway(Frontend.ERB_GT),
    UbmPathway(Frontend.ERB_GT, derivatives=2),
    UbmPathway(Frontend.ERB_GT, context=4, lda_dim=60),
)
