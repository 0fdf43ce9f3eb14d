"""Reference-feature samplers for the adaptation phase.

Alignment losses compare encoded target features against source
features f(s).  N1 is frozen during adaptation, so f(S) is a static
matrix computed once; a sampler turns that matrix into per-minibatch
reference batches.  Two strategies are provided: draw from a diagonal
Gaussian fitted to f(S), or resample rows of f(S) directly.
"""

from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-8

SAMPLER_KINDS = ("indirect", "random")


class SamplingError(Exception):
    """Base class for sampler failures."""


class TooFewExamples(SamplingError):
    """Gaussian fitting needs at least two source examples."""


class EmptySource(SamplingError):
    """Random sampling needs a nonempty source feature set."""


@dataclass(frozen=True)
class GaussianParams:
    """Per-dimension mean and standard deviation of f(S)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise SamplingError("mean and std must be matching vectors")
        if not np.all(self.std > 0):
            raise SamplingError("std must be positive everywhere")


def fit_gaussian(source_features):
    """Fit a diagonal Gaussian to an N x k feature matrix.

    Uses the population standard deviation (divide by N) and floors it
    at STD_FLOOR so degenerate dimensions stay sampleable.

    Raises:
        TooFewExamples: if fewer than two rows are given.
    """
    feats = np.asarray(source_features, dtype=np.float64)
    if feats.ndim != 2:
        raise SamplingError(f"expected an N x k matrix, got shape {feats.shape}")
    if feats.shape[0] < 2:
        raise TooFewExamples(f"need at least 2 examples, got {feats.shape[0]}")
    mean = feats.mean(axis=0)
    std = np.maximum(feats.std(axis=0), STD_FLOOR)
    return GaussianParams(mean=mean, std=std)


class IndirectSampler:
    """Draws reference features from a fitted diagonal Gaussian."""

    kind = "indirect"

    def __init__(self, params, rng):
        self.params = params
        self.rng = rng

    def draw(self, n):
        if n < 1:
            raise SamplingError(f"batch size must be positive, got {n}")
        k = self.params.mean.shape[0]
        noise = self.rng.standard_normal((n, k))
        return self.params.mean + noise * self.params.std


class RandomSampler:
    """Resamples rows of the cached source feature matrix.

    Rows are drawn uniformly without replacement within one call (one
    minibatch); successive calls draw independently, so features recur
    across minibatches.  If n exceeds the source size the draw falls
    back to replacement.
    """

    kind = "random"

    def __init__(self, source_features, rng):
        feats = np.asarray(source_features, dtype=np.float64)
        if feats.ndim != 2:
            raise SamplingError(f"expected an N x k matrix, got shape {feats.shape}")
        if feats.shape[0] == 0:
            raise EmptySource("source feature set is empty")
        self.features = feats
        self.rng = rng

    def draw(self, n):
        if n < 1:
            raise SamplingError(f"batch size must be positive, got {n}")
        count = self.features.shape[0]
        idx = self.rng.choice(count, size=n, replace=n > count)
        return self.features[idx].copy()


def make_sampler(kind, source_features, rng):
    """Build a sampler of the given kind over cached source features."""
    if kind == "indirect":
        return IndirectSampler(fit_gaussian(source_features), rng)
    if kind == "random":
        return RandomSampler(source_features, rng)
    raise SamplingError(f"unknown sampler kind {kind!r}; choose from {SAMPLER_KINDS}")
