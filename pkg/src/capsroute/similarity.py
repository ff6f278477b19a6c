"""Similarity-learning routing: kernel clustering with two KL penalties.

For a fixed pose the compatibilities minimizing

    L(C) = -sum_i c_i k(mu, v_i) + lam1 KL(C || U) + lam2 KL(C || A)

over the simplex are

    c_i  ∝  a_i^(lam2 / (lam1 + lam2)) * exp(k(mu, v_i) / (lam1 + lam2)),

i.e. a softmax of ``k / T + (lam2 / T) log a`` with temperature
``T = lam1 + lam2``. The output activation is

    sigmoid(beta1 sum_i c_i k(mu, v_i) - beta2 KL(C || A) + beta3).

In the activation, A is normalized over the receptive field so the KL term
is a divergence between two distributions. Against raw activations it
would carry an offset of -log(sum_i a_i) that saturates the sigmoid for
large receptive fields. The compatibility update is unaffected because a
constant shift of log a cancels in the softmax.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .kernels import CosineKernel, softplus_inverse
from .routing import RoutingProcedure, weighted_mean

ACTIVATION_FLOOR = 1e-6
TEMPERATURE_FLOOR = 1e-4


@dataclass
class SimilarityState:
    log_a: T.Tensor
    log_a_norm: T.Tensor
    sim: T.Tensor = None
    log_c: T.Tensor = None


def _channel_view(p, ndim):
    """Reshape a (O,) parameter to broadcast against (..., O, N)."""
    return T.reshape(p, (1,) * (ndim - 2) + (-1, 1))


def log_activations(activations):
    return T.log(T.clip(activations, ACTIVATION_FLOOR, 1.0))


def normalized_log_activations(activations):
    """log(a_i / sum_j a_j) over the last axis, after clamping."""
    return T.log_softmax(log_activations(activations), -1)


def kl_uniform(c):
    """KL(C || U) = sum_i c_i log(n c_i)."""
    n = c.shape[-1]
    return T.sum_(T.xlogy(c, c), -1) + float(np.log(n))


def kl_activations(c, log_a, log_c=None):
    """KL(C || A) = sum_i c_i (log c_i - log a_i); zero-weight terms vanish."""
    if log_c is None:
        return T.sum_(T.xlogy(c, c) - c * log_a, -1)
    return T.sum_(c * (log_c - log_a), -1)


class SimilarityRouting(RoutingProcedure):
    """Per-channel learnable lam1, lam2 (>= 0), beta1, beta2 (>= 0), beta3.

    The kernel is shared by every channel of the layer. Nonnegative
    quantities are stored as free parameters passed through softplus.
    """

    def __init__(self, channels, kernel, lambda1=1.0, lambda2=1.0, beta1=1.0, beta2=1.0, beta3=0.0):
        self.channels = channels
        self.kernel = kernel

        def free(v):
            return T.parameter(np.full(channels, softplus_inverse(v)))

        self.lambda1_free = free(lambda1)
        self.lambda2_free = free(lambda2)
        self.beta1_free = free(beta1)
        self.beta2_free = free(beta2)
        self.beta3 = T.parameter(np.full(channels, float(beta3)))

    @property
    def lambda1(self):
        return T.softplus(self.lambda1_free)

    @property
    def lambda2(self):
        return T.softplus(self.lambda2_free)

    @property
    def beta1(self):
        return T.softplus(self.beta1_free)

    @property
    def beta2(self):
        return T.softplus(self.beta2_free)

    def _coefficients(self, ndim):
        lam1 = _channel_view(self.lambda1, ndim)
        lam2 = _channel_view(self.lambda2, ndim)
        temp = T.maximum(lam1 + lam2, TEMPERATURE_FLOOR)
        return temp, lam2 / temp

    def init_state(self, votes, activations):
        log_a = log_activations(activations)
        return SimilarityState(log_a, T.log_softmax(log_a, -1))

    def compatibility(self, c, state, votes, activations, mu, p):
        sim = state.sim if state.sim is not None else self.kernel.similarity(mu, votes)
        temp, prior_w = self._coefficients(sim.ndim)
        logits = sim / temp + prior_w * state.log_a
        log_c = T.log_softmax(logits, -1)
        return T.exp(log_c), SimilarityState(state.log_a, state.log_a_norm, None, log_c)

    def activation(self, mu, state, votes, c, activations):
        sim = self.kernel.similarity(mu, votes)
        agreement = T.sum_(c * sim, -1)
        kl = kl_activations(c, state.log_a_norm, state.log_c)
        lead = (1,) * (agreement.ndim - 1) + (-1,)
        b1 = T.reshape(self.beta1, lead)
        b2 = T.reshape(self.beta2, lead)
        b3 = T.reshape(self.beta3, lead)
        p = T.sigmoid(b1 * agreement - b2 * kl + b3)
        return p, SimilarityState(state.log_a, state.log_a_norm, sim, state.log_c)


# ---------------------------------------------------------------------------
# Functional forms used by tests, the toy experiment and the CLI
# ---------------------------------------------------------------------------

def clustering_objective(c, similarities, activations, lambda1, lambda2):
    """-sum c_i s_i + lam1 KL(C||U) + lam2 KL(C||A) for precomputed
    similarities ``s_i = k(mu, v_i)``. Works on arrays; returns float64."""
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(similarities, dtype=np.float64)
    a = np.asarray(activations, dtype=np.float64)
    if np.any((a <= 0) & (c > 0)) and lambda2 > 0:
        raise T.DomainError("KL(C||A) undefined: zero activation with positive compatibility")
    n = c.shape[-1]
    pos = c > 0
    safe_c = np.where(pos, c, 1.0)
    kl_u = np.where(pos, c * np.log(n * safe_c), 0.0).sum(-1)
    if lambda2 > 0:
        kl_a = np.where(pos, c * (np.log(safe_c) - np.log(np.where(pos, a, 1.0))), 0.0).sum(-1)
    else:
        kl_a = 0.0
    return -(c * s).sum(-1) + lambda1 * kl_u + lambda2 * kl_a


def compatibility_update(similarities, activations, lambda1, lambda2):
    """Closed-form minimizer of the clustering objective at fixed pose.

    Accepts tensors or arrays; ``lambda1``/``lambda2`` may be scalars or
    tensors broadcasting against the similarities.
    """
    s = similarities if isinstance(similarities, T.Tensor) else T.tensor(similarities)
    a = activations if isinstance(activations, T.Tensor) else T.constant(activations, like=s)
    lam1 = lambda1 if isinstance(lambda1, T.Tensor) else float(lambda1)
    lam2 = lambda2 if isinstance(lambda2, T.Tensor) else float(lambda2)
    temp = lam1 + lam2
    if isinstance(temp, T.Tensor):
        temp = T.maximum(temp, TEMPERATURE_FLOOR)
    else:
        temp = max(temp, TEMPERATURE_FLOOR)
    logits = s / temp + (lam2 / temp) * log_activations(a)
    return T.softmax(logits, -1)


def activation_eval(mu, votes, c, activations, kernel, beta1, beta2, beta3):
    """sigmoid(beta1 sum c_i k(mu, v_i) - beta2 KL(C||A) + beta3), with A
    normalized over the last axis."""
    sim = kernel.similarity(mu, votes)
    kl = kl_activations(c, normalized_log_activations(activations))
    return T.sigmoid(beta1 * T.sum_(c * sim, -1) - beta2 * kl + beta3)


@dataclass
class ToyResult:
    lambda1: float
    lambda2: float
    compatibility: np.ndarray
    pose: np.ndarray
    iterations: int


def solve_toy(votes, activations, lambda_grid, kernel=None, iterations=100, tol=1e-12):
    """Alternate mu = sum c_i v_i and the closed-form C update until the
    compatibilities stop moving or ``iterations`` is reached.

    ``votes`` is (n, D), ``activations`` (n,). Returns one :class:`ToyResult`
    per (lam1, lam2) pair.
    """
    kernel = kernel or CosineKernel()
    votes = np.asarray(votes, dtype=np.float64)
    activations = np.asarray(activations, dtype=np.float64)
    results = []
    with T.precision(64), T.no_grad():
        v = T.tensor(votes)
        for lam1, lam2 in lambda_grid:
            c = np.full(len(votes), 1.0 / len(votes))
            mu = votes.mean(0)
            done = 0
            for done in range(1, iterations + 1):
                sim = kernel.similarity(T.tensor(mu), v)
                c_new = compatibility_update(sim, activations, lam1, lam2).data
                mu = weighted_mean(v, T.tensor(c_new)).data
                delta = np.abs(c_new - c).max()
                c = c_new
                if delta < tol:
                    break
            results.append(ToyResult(float(lam1), float(lam2), c, mu, done))
    return results
