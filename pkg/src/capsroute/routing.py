"""Generic routing loop and receptive-field geometry.

Votes are laid out as (..., N, D): any leading axes, then the N votes of one
receptive field, then the flattened pose. Activations are (..., N) and may
carry size-1 leading axes (e.g. shared across output channels). Procedures
with per-channel parameters treat the last leading axis as the output
channel.
"""

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import tensor as T
from .nn import Module


class RoutingContractError(RuntimeError):
    """A procedure returned compatibilities outside the allowed range."""


@dataclass
class RoutingOutcome:
    pose: T.Tensor
    activation: T.Tensor
    compatibility: T.Tensor
    state: Any = None


class RoutingProcedure(Module):
    """Pluggable compatibility/activation pair driven by :func:`route`.

    Both hooks receive the full routing context and return an updated state
    alongside their result, so a procedure can cache quantities (for example
    similarities at the current pose) between the activation of one
    iteration and the compatibility update of the next.
    """

    def init_state(self, votes, activations):
        return None

    def compatibility(self, c, state, votes, activations, mu, p):
        raise NotImplementedError

    def activation(self, mu, state, votes, c, activations):
        raise NotImplementedError


def weighted_mean(votes, c):
    """sum_i c_i v_i / sum_i c_i over the vote axis."""
    num = T.sum_(votes * T.expand_dims(c, -1), -2)
    den = T.sum_(c, -1, keepdims=True)
    return num / den


def route(votes, activations, procedure, iterations=3):
    """Run ``iterations`` rounds of compatibility -> pose -> activation.

    Compatibilities start uniform, so with zero iterations the pose is the
    plain vote mean.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if votes.ndim < 2:
        raise T.ShapeError(f"route: votes need shape (..., N, D), got {votes.shape}")
    n = votes.shape[-2]
    if n < 1:
        raise T.ShapeError("route: empty receptive field")
    if activations.ndim != votes.ndim - 1 or activations.shape[-1] != n:
        raise T.ShapeError(f"route: activations {activations.shape} do not match votes {votes.shape}")
    c = T.constant(np.full(votes.shape[:-1], 1.0 / n), like=votes)
    state = procedure.init_state(votes, activations)
    mu = weighted_mean(votes, c)
    p, state = procedure.activation(mu, state, votes, c, activations)
    for _ in range(iterations):
        c, state = procedure.compatibility(c, state, votes, activations, mu, p)
        if np.any(c.data < 0):
            raise RoutingContractError(f"{type(procedure).__name__} produced negative compatibility")
        mu = weighted_mean(votes, c)
        p, state = procedure.activation(mu, state, votes, c, activations)
    return RoutingOutcome(mu, p, c, state)


def output_extent(size, k, s):
    if k > size:
        raise T.ShapeError(f"kernel {k} exceeds spatial extent {size}")
    return (size - k) // s + 1


def extract_receptive_fields(height, width, channels, k, s):
    """Flat capsule indices routed to each output position.

    Input capsules are indexed row-major over (row, col, channel). Returns an
    int array of shape (Ho, Wo, K*K*channels), ordered (ki, kj, channel)
    within a group, which matches the layout produced by
    :func:`tensor.window_gather`.
    """
    ho = output_extent(height, k, s)
    wo = output_extent(width, k, s)
    idx = np.arange(height * width * channels).reshape(height, width, channels)
    groups = np.empty((ho, wo, k * k * channels), dtype=np.int64)
    for i in range(ho):
        for j in range(wo):
            groups[i, j] = idx[i * s:i * s + k, j * s:j * s + k].reshape(-1)
    return groups
