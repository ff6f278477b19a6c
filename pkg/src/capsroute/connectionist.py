"""Connectionist routing: an LSTM carries per-vote state across iterations.

Each vote's cell input is concat(mu, c_i, v_i, a_i). A network f_theta maps
the hidden state to the new compatibility (sigmoid, no normalization across
the receptive field) and g_beta maps the compatibility-weighted sum of cell
states to the output activation. All weights are shared across input
capsules.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Module, uniform_init
from .routing import RoutingProcedure


@dataclass
class ConnectionistState:
    h: T.Tensor
    s: T.Tensor
    drive: T.Tensor      # gate contribution of (v_i, a_i) plus bias; fixed per route
    updates: int = 0


class LSTMCell(Module):
    """Gate weights stored stacked as (input + H, 4H), gate order i, f, o, g."""

    def __init__(self, n_in, hidden, rng):
        fan_in = n_in + hidden
        w = uniform_init(rng, fan_in, (fan_in, 4 * hidden))
        b = uniform_init(rng, fan_in, (4 * hidden,))
        b[hidden:2 * hidden] = 1.0
        self.n_in, self.hidden = n_in, hidden
        self.weight = T.parameter(w, name="weight")
        self.bias = T.parameter(b, name="bias")


def lstm_step(cell, x, state):
    """One LSTM update on explicit inputs ``x`` (..., n_in) and state (h, s)."""
    h, s = state
    if x.shape[-1] != cell.n_in or h.shape[-1] != cell.hidden or s.shape[-1] != cell.hidden:
        raise T.ShapeError(f"lstm_step: input {x.shape}, state {h.shape}/{s.shape} "
                           f"for cell ({cell.n_in}, {cell.hidden})")
    xh = T.concat([x, h], -1)
    z = T.matmul(xh, cell.weight) + T.reshape(cell.bias, (1,) * (xh.ndim - 1) + (-1,))
    return T.lstm_cell(z, s)


class ConnectionistRouting(RoutingProcedure):
    def __init__(self, pose_dim=16, hidden=16, f_hidden=(), g_hidden=(), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pose_dim, self.hidden = pose_dim, hidden
        self.cell = LSTMCell(2 * pose_dim + 2, hidden, rng)
        self.f_theta = MLP(hidden, tuple(f_hidden), rng)
        self.g_beta = MLP(hidden, tuple(g_hidden), rng)

    # row blocks of the stacked gate weight: mu | c | v | a | h
    def _blocks(self):
        d = self.pose_dim
        w = self.cell.weight
        return w[0:d], w[d:d + 1], w[d + 1:2 * d + 1], w[2 * d + 1:2 * d + 2], w[2 * d + 2:]

    def init_state(self, votes, activations):
        _, _, w_v, w_a, _ = self._blocks()
        lead = votes.shape[:-1]
        drive = T.matmul(votes, w_v)
        drive = drive + T.matmul(T.expand_dims(activations, -1), w_a)
        drive = drive + T.reshape(self.cell.bias, (1,) * len(lead) + (-1,))
        zeros = T.constant(np.zeros(lead + (self.hidden,)), like=votes)
        return ConnectionistState(None, zeros, drive, 0)

    def compatibility(self, c, state, votes, activations, mu, p):
        w_mu, w_c, _, _, w_h = self._blocks()
        z = state.drive + T.expand_dims(T.matmul(mu, w_mu), -2)
        z = z + T.matmul(T.expand_dims(c, -1), w_c)
        if state.h is not None:
            z = z + T.matmul(state.h, w_h)
        h, s = T.lstm_cell(z, state.s)
        c_new = T.squeeze(self.f_theta(h), -1)
        return c_new, ConnectionistState(h, s, state.drive, state.updates + 1)

    def activation(self, mu, state, votes, c, activations):
        pooled = T.sum_(state.s * T.expand_dims(c, -1), -2)
        return T.squeeze(self.g_beta(pooled), -1), state


def compatibility_step(procedure, c_i, v_i, a_i, mu, state_i):
    """Reference per-capsule form: returns (c_i', (h', s'))."""
    x = T.concat([mu, c_i, v_i, a_i], -1)
    h, s = lstm_step(procedure.cell, x, state_i)
    return T.squeeze(procedure.f_theta(h), -1), (h, s)


def activation_from_states(procedure, c, states):
    """g_beta(sum_i c_i s_i) for cell states (..., N, H)."""
    pooled = T.sum_(states * T.expand_dims(c, -1), -2)
    return T.squeeze(procedure.g_beta(pooled), -1)
