"""Parametric similarity functions for similarity-learning routing."""

import numpy as np

from . import tensor as T
from .nn import Module


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class Kernel(Module):
    family = None

    def __call__(self, x, y):
        return self.evaluate(x, y)

    def evaluate(self, x, y):
        """Similarity of ``x`` and ``y`` along the last axis (shapes broadcast
        keepdims-style)."""
        raise NotImplementedError

    def similarity(self, mu, votes):
        """Similarity of the pose ``mu`` (..., D) to each vote (..., N, D)."""
        return self.evaluate(T.expand_dims(mu, -2), votes)


class GaussianMixtureKernel(Kernel):
    """sum_q w_q exp(-|x - y|^2 / (2 b_q^2)) with softplus-positive w, b.

    Weights start at 1/Q, bandwidths log-spaced over [0.5, 2].
    """

    family = "gaussian_mixture"

    def __init__(self, components=4, weights=None, bandwidths=None):
        if components < 1:
            raise ValueError("gaussian_mixture needs at least one component")
        if weights is None:
            weights = np.full(components, 1.0 / components)
        if bandwidths is None:
            bandwidths = np.logspace(np.log10(0.5), np.log10(2.0), components) if components > 1 else [1.0]
        weights = np.asarray(weights, dtype=np.float64)
        bandwidths = np.asarray(bandwidths, dtype=np.float64)
        if weights.shape != (components,) or bandwidths.shape != (components,):
            raise ValueError("theta arrays must have one entry per component")
        if np.any(weights <= 0) or np.any(bandwidths <= 0):
            raise ValueError("gaussian_mixture parameters must be positive")
        self.components = components
        self.weight_free = T.parameter(softplus_inverse(weights), name="theta1")
        self.bandwidth_free = T.parameter(softplus_inverse(bandwidths), name="theta2")

    @property
    def weights(self):
        return T.softplus(self.weight_free)

    @property
    def bandwidths(self):
        return T.softplus(self.bandwidth_free)

    def evaluate(self, x, y):
        d2 = T.sq_norm(x - y, -1)
        return T.gaussian_mixture(d2, self.weights, self.bandwidths)


class CosineKernel(Kernel):
    family = "cosine"

    def evaluate(self, x, y):
        nx = T.sq_norm(x, -1)
        ny = T.sq_norm(y, -1)
        if np.any(nx.data == 0) or np.any(ny.data == 0):
            raise T.DomainError("cosine similarity of a zero-norm vector")
        dot = T.sum_(x * y, -1)
        return dot / (T.sqrt(nx) * T.sqrt(ny))


class LinearKernel(Kernel):
    family = "linear"

    def evaluate(self, x, y):
        return T.sum_(x * y, -1)


def make_kernel(family, components=4):
    if family == "gaussian_mixture":
        return GaussianMixtureKernel(components)
    if family == "cosine":
        return CosineKernel()
    if family == "linear":
        return LinearKernel()
    raise ValueError(f"unknown kernel family {family!r}")


def kernel_eval(kernel, x, y):
    """Evaluate ``kernel`` on flattened poses; plain arrays are accepted."""
    if not isinstance(x, T.Tensor):
        x = T.tensor(x)
    if not isinstance(y, T.Tensor):
        y = T.tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise T.ShapeError(f"kernel_eval: vector lengths differ ({x.shape[-1]} vs {y.shape[-1]})")
    return kernel.evaluate(x, y)
