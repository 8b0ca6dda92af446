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
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.stats
from tqdm import tqdm

from spkadapt.exceptions import (DataError, DegenerateDataError, DimensionMismatchError, InvalidParameterError,
                                 NonFiniteDataError, UbmMismatchError)
from spkadapt.models.gmm import BwStats, DiagonalGmm, accumulate_stats
from spkadapt.models.model import Model

logger = logging.getLogger(__name__)

T_INIT_SCALE = 0.1
COVARIANCE_REGULARIZATION = 1e-6
MIN_COMPONENT_COUNT = 1e-10


class Normalization(str, Enum):
    NONE = "NONE"
    UNITY = "UNITY"
    SQRT_D = "SQRT_D"
    RG = "RG"

    @classmethod
    def parse(cls, text):
        """Accept enum names and the command-line spellings none/unity/sqrt/rg."""
        if isinstance(text, cls):
            return text
        aliases = {"none": cls.NONE, "unity": cls.UNITY, "sqrt": cls.SQRT_D, "sqrt_d": cls.SQRT_D, "rg": cls.RG}
        try:
            return aliases[str(text).strip().lower()]
        except KeyError:
            raise InvalidParameterError(f"Unknown i-vector normalization '{text}'. Use one of none, unity, sqrt, rg.") from None


@dataclass(frozen=True, eq=False)
class IVector:
    utterance_id: str
    values: np.ndarray
    normalization: Normalization = Normalization.NONE

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise NonFiniteDataError(f"i-vector of '{self.utterance_id}' has non-finite values.")
        values.setflags(write=False)
        normalization = Normalization(self.normalization)
        expected = {Normalization.UNITY: 1.0, Normalization.SQRT_D: np.sqrt(values.size)}.get(normalization)
        if expected is not None and abs(np.linalg.norm(values) - expected) > 1e-10 * max(1.0, expected):
            raise DataError(f"i-vector of '{self.utterance_id}' is marked {normalization.value} but has norm {np.linalg.norm(values)}.")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "normalization", normalization)

    @property
    def dim(self):
        return self.values.size


class TotalVariabilityModel(Model):
    """
    A UBM plus a low-rank matrix T mapping an R-dim latent factor to offsets of the UBM mean supervector.

    Rows of T are grouped in C blocks of D, component-major, matching BwStats.first_centered.ravel().

    Attributes:
        ubm (DiagonalGmm)
        t_matrix (numpy.ndarray): (C * D) x R.
        history (numpy.ndarray): Marginal log-likelihood of the training statistics (up to a constant)
            before training and after every EM iteration.
    """

    kind = "TV"

    def __init__(self, ubm: DiagonalGmm, t_matrix, history=()):
        t_matrix = np.asarray(t_matrix, dtype=np.float64)
        if t_matrix.ndim != 2 or t_matrix.shape[0] != ubm.num_components * ubm.dim or t_matrix.shape[1] < 1:
            raise DimensionMismatchError(f"T must be {ubm.num_components * ubm.dim} x R, got {t_matrix.shape}.")
        if not np.all(np.isfinite(t_matrix)):
            raise NonFiniteDataError("T matrix has non-finite entries.")
        self.ubm = ubm
        self.t_matrix = t_matrix
        self.history = np.asarray(history, dtype=np.float64)

    @property
    def rank(self):
        return self.t_matrix.shape[1]

    def to_payload(self):
        _, ubm_arrays = self.ubm.to_payload()
        arrays = {f"ubm/{name}": arr for name, arr in ubm_arrays.items()}
        arrays["t_matrix"] = self.t_matrix
        arrays["history"] = self.history
        return {}, arrays

    @classmethod
    def from_payload(cls, meta, arrays):
        ubm = DiagonalGmm.from_payload({}, cls._nested_arrays("ubm", arrays))
        return cls(ubm, arrays["t_matrix"], arrays["history"])


def _check_stats(ubm, stats):
    if stats.num_components != ubm.num_components or stats.dim != ubm.dim:
        raise UbmMismatchError(f"Statistics of '{stats.utterance_id}' are {stats.num_components} x {stats.dim}; "
                               f"the UBM is {ubm.num_components} x {ubm.dim}.")
    if stats.ubm_fingerprint and stats.ubm_fingerprint != ubm.fingerprint():
        raise UbmMismatchError(f"Statistics of '{stats.utterance_id}' were accumulated with a different UBM.")


def _latent_posterior(t_matrix, t_prec, dim, stats):
    """Posterior of the latent factor given one utterance's statistics.

    Returns:
    tuple: (mean w, covariance L^-1, 0.5 b'L^-1 b - 0.5 log|L|)
    """
    rank = t_matrix.shape[1]
    counts = np.repeat(stats.zeroth, dim)
    precision = np.eye(rank) + (t_prec * counts) @ t_matrix
    linear = t_prec @ stats.first_centered.ravel()
    chol = scipy.linalg.cho_factor(precision, lower=True)
    covariance = scipy.linalg.cho_solve(chol, np.eye(rank))
    mean = covariance @ linear
    log_det = 2.0 * np.log(np.diag(chol[0])).sum()
    return mean, covariance, 0.5 * linear @ mean - 0.5 * log_det


def _e_step(t_matrix, precision, dim, stats, workers):
    # T' Sigma^-1 is shared by every utterance of the pass
    t_prec = t_matrix.T * precision
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(lambda s: _latent_posterior(t_matrix, t_prec, dim, s), stats))
    return [_latent_posterior(t_matrix, t_prec, dim, s) for s in stats]


def train_tv(ubm: DiagonalGmm, stats, rank, iterations=10, seed=0, workers=1, verbose=False) -> TotalVariabilityModel:
    """Estimate the total-variability matrix by EM.

    Parameters:
    ubm (DiagonalGmm): The UBM the statistics were accumulated with.
    stats (list of BwStats): One entry per training utterance, reduced in list order.
    rank (int): i-vector dimension R.
    iterations (int): EM iterations.
    seed (int): Seeds the N(0, 0.1^2) initialization of T.
    workers (int, optional): Threads for the per-utterance E-step.
    verbose (bool, optional): Show a progress bar.

    Returns:
    TotalVariabilityModel
    """
    stats = list(stats)
    if not stats:
        raise DataError("Total-variability training needs at least one utterance of statistics.")
    if rank < 1 or iterations < 1:
        raise InvalidParameterError(f"rank and iterations must be at least 1, got {rank} and {iterations}.")
    num_components, dim = ubm.num_components, ubm.dim
    if rank > num_components * dim:
        raise InvalidParameterError(f"rank {rank} exceeds the supervector dimension {num_components * dim}.")
    for s in stats:
        _check_stats(ubm, s)
    if sum(s.zeroth.sum() for s in stats) <= MIN_COMPONENT_COUNT:
        raise DegenerateDataError("Every utterance has zero statistics; T can't be estimated.")

    precision = (1.0 / ubm.variances).ravel()
    rng = np.random.default_rng(seed)
    t_matrix = rng.normal(0.0, T_INIT_SCALE, size=(num_components * dim, rank))
    first = np.stack([s.first_centered.ravel() for s in stats])
    zeroth = np.stack([s.zeroth for s in stats])

    history = []
    for _ in tqdm(range(iterations), desc="T matrix EM", disable=not verbose):
        posteriors = _e_step(t_matrix, precision, dim, stats, workers)
        history.append(sum(p[2] for p in posteriors))

        means = np.stack([p[0] for p in posteriors])
        second = np.stack([p[1] + np.outer(p[0], p[0]) for p in posteriors])
        cross = first.T @ means
        component_second = np.einsum("uc,urs->crs", zeroth, second)
        updated = t_matrix.copy()
        for c in range(num_components):
            if zeroth[:, c].sum() <= MIN_COMPONENT_COUNT:
                continue
            rows = slice(c * dim, (c + 1) * dim)
            updated[rows] = scipy.linalg.solve(component_second[c], cross[rows].T, assume_a="pos").T
        t_matrix = updated
        logger.debug("TV EM objective %.6f", history[-1])

    history.append(sum(p[2] for p in _e_step(t_matrix, precision, dim, stats, workers)))
    logger.info("Trained rank-%d T matrix on %d utterances; objective %.4f -> %.4f", rank, len(stats), history[0], history[-1])
    return TotalVariabilityModel(ubm, t_matrix, history)


def extract_ivector(tv: TotalVariabilityModel, s: BwStats) -> IVector:
    """Posterior mean of the latent factor, w = (I + T' S^-1 N T)^-1 T' S^-1 f."""
    _check_stats(tv.ubm, s)
    t_prec = tv.t_matrix.T * (1.0 / tv.ubm.variances).ravel()
    mean, _, _ = _latent_posterior(tv.t_matrix, t_prec, tv.ubm.dim, s)
    return IVector(s.utterance_id, mean, Normalization.NONE)


def collect_stats(ubm: DiagonalGmm, features, masks=None, workers=1):
    """Baum-Welch statistics for a list of utterances, in input order.

    Parameters:
    ubm (DiagonalGmm)
    features (list of FeatureMatrix)
    masks (dict, optional): utterance id -> per-frame speech flags. Missing ids use every frame.
    workers (int, optional): Threads to accumulate with.

    Returns:
    list of BwStats
    """
    masks = masks or {}

    def accumulate(f):
        return accumulate_stats(ubm, f, masks.get(f.utterance_id))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(accumulate, features))
    return [accumulate(f) for f in features]


def extract_ivectors(tv: TotalVariabilityModel, features, masks=None, workers=1):
    """One i-vector per utterance.

    Returns:
    dict: utterance id -> IVector, in input order.
    """
    stats = collect_stats(tv.ubm, features, masks, workers)
    return {s.utterance_id: extract_ivector(tv, s) for s in stats}


def normalize(v: IVector, method) -> IVector:
    """Length-normalize an i-vector.

    NONE returns v unchanged, UNITY scales to unit norm and SQRT_D to norm sqrt(R).
    RG needs a fitted transform; use apply_rg.
    """
    method = Normalization.parse(method)
    if method == Normalization.NONE:
        return v
    if method == Normalization.RG:
        raise InvalidParameterError("RG normalization needs a fitted transform; use fit_rg and apply_rg.")
    norm = np.linalg.norm(v.values)
    if norm == 0.0:
        raise DegenerateDataError(f"Can't length-normalize the zero i-vector of '{v.utterance_id}'.")
    scale = 1.0 if method == Normalization.UNITY else np.sqrt(v.dim)
    return IVector(v.utterance_id, v.values / norm * scale, method)


class RgTransform(Model):
    """Whitening followed by a radial remap that sends the empirical radius distribution to chi(R).

    Attributes:
        whitening_mean (numpy.ndarray): R.
        whitening_matrix (numpy.ndarray): R x R, symmetric inverse square root of the training covariance.
        radius_knots (numpy.ndarray): Strictly increasing whitened training radii.
        quantile_knots (numpy.ndarray): Strictly increasing empirical CDF values at those radii.
        target_dof (int): Degrees of freedom of the target chi distribution (R).
    """

    kind = "RG"

    def __init__(self, whitening_mean, whitening_matrix, radius_knots, quantile_knots, target_dof):
        self.whitening_mean = np.asarray(whitening_mean, dtype=np.float64)
        self.whitening_matrix = np.asarray(whitening_matrix, dtype=np.float64)
        self.radius_knots = np.asarray(radius_knots, dtype=np.float64)
        self.quantile_knots = np.asarray(quantile_knots, dtype=np.float64)
        self.target_dof = int(target_dof)
        if self.radius_knots.size < 2 or self.radius_knots.shape != self.quantile_knots.shape:
            raise DegenerateDataError("The radial map needs at least two knots.")
        if np.any(np.diff(self.radius_knots) <= 0) or np.any(np.diff(self.quantile_knots) <= 0):
            raise DataError("Radial map knots must be strictly increasing.")

    @property
    def dim(self):
        return self.whitening_mean.size

    def radial_cdf(self, radii):
        """Piecewise-linear empirical CDF, extrapolated linearly past the end knots, kept inside (0, 1)."""
        r, q = self.radius_knots, self.quantile_knots
        radii = np.asarray(radii, dtype=np.float64)
        values = np.interp(radii, r, q)
        low_slope = (q[1] - q[0]) / (r[1] - r[0])
        high_slope = (q[-1] - q[-2]) / (r[-1] - r[-2])
        values = np.where(radii < r[0], q[0] + low_slope * (radii - r[0]), values)
        values = np.where(radii > r[-1], q[-1] + high_slope * (radii - r[-1]), values)
        return np.clip(values, q[0] / 2.0, 1.0 - (1.0 - q[-1]) / 2.0)

    def to_payload(self):
        arrays = {
            "whitening_mean": self.whitening_mean,
            "whitening_matrix": self.whitening_matrix,
            "radius_knots": self.radius_knots,
            "quantile_knots": self.quantile_knots,
        }
        return {"target_dof": self.target_dof}, arrays

    @classmethod
    def from_payload(cls, meta, arrays):
        return cls(arrays["whitening_mean"], arrays["whitening_matrix"], arrays["radius_knots"],
                   arrays["quantile_knots"], meta["target_dof"])


def _values(v):
    return v.values if isinstance(v, IVector) else np.asarray(v, dtype=np.float64).ravel()


def fit_rg(training_ivectors) -> RgTransform:
    """Fit radial Gaussianization on training i-vectors (IVector objects or raw R-vectors)."""
    data = np.stack([_values(v) for v in training_ivectors]) if len(training_ivectors) else np.zeros((0, 0))
    num, dim = data.shape
    if num < dim + 1 or num < 2:
        raise DegenerateDataError(f"RG needs at least R + 1 = {dim + 1} training vectors, got {num}.")
    mean = data.mean(axis=0)
    covariance = np.cov(data, rowvar=False).reshape(dim, dim) + COVARIANCE_REGULARIZATION * np.eye(dim)
    eigvals, eigvecs = np.linalg.eigh(covariance)
    whitening = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T

    radii = np.linalg.norm((data - mean) @ whitening, axis=1)
    ranks = (np.arange(num) + 0.5) / num
    knots, inverse = np.unique(np.sort(radii), return_inverse=True)
    quantiles = np.bincount(inverse, weights=ranks) / np.bincount(inverse)
    logger.debug("Fitted RG on %d vectors of dimension %d (%d radial knots)", num, dim, knots.size)
    return RgTransform(mean, whitening, knots, quantiles, dim)


def apply_rg(rg: RgTransform, v: IVector) -> IVector:
    """Whiten, then move the radius to the matching chi(R) quantile. Direction in whitened space is kept."""
    values = _values(v)
    if values.size != rg.dim:
        raise DimensionMismatchError(f"i-vector has dimension {values.size}; the RG transform expects {rg.dim}.")
    whitened = (values - rg.whitening_mean) @ rg.whitening_matrix
    radius = np.linalg.norm(whitened)
    utterance_id = v.utterance_id if isinstance(v, IVector) else ""
    if radius == 0.0:
        return IVector(utterance_id, np.zeros_like(whitened), Normalization.RG)
    target = scipy.stats.chi.ppf(rg.radial_cdf(radius), rg.target_dof)
    return IVector(utterance_id, whitened * (target / radius), Normalization.RG)


def normalize_ivectors(ivectors, method, rg: RgTransform = None):
    """Normalize a dict of i-vectors with one method; RG requires `rg`."""
    method = Normalization.parse(method)
    if method == Normalization.RG:
        if rg is None:
            raise InvalidParameterError("RG normalization needs a transform fitted on training i-vectors.")
        return {utt: apply_rg(rg, v) for utt, v in ivectors.items()}
    return {utt: normalize(v, method) for utt, v in ivectors.items()}
