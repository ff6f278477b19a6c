"""Independent reference computations used by several test modules."""

import itertools

import numpy as np
from scipy.special import xlogy


def objective(c, s, a, lam1, lam2):
    """Clustering objective for a stack of candidate compatibilities c (..., n)."""
    n = c.shape[-1]
    kl_u = xlogy(c, c).sum(-1) + np.log(n)
    kl_a = (xlogy(c, c) - xlogy(c, np.broadcast_to(a, c.shape))).sum(-1)
    return -(c * s).sum(-1) + lam1 * kl_u + lam2 * kl_a


def simplex_grid(n, res, lo=None, hi=None):
    """All points of the n-simplex with coordinates on a ``res`` lattice.

    ``lo``/``hi`` optionally bound the first n-1 coordinates (a refinement box).
    """
    steps = int(round(1 / res))
    lo = np.zeros(n - 1) if lo is None else lo
    hi = np.ones(n - 1) if hi is None else hi
    axes = [np.arange(max(0, int(np.floor(l * steps))), min(steps, int(np.ceil(h * steps))) + 1)
            for l, h in zip(lo, hi)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n - 1)
    last = steps - mesh.sum(-1)
    keep = last >= 0
    pts = np.concatenate([mesh[keep], last[keep, None]], -1)
    return pts / steps


def grid_minimize(s, a, lam1, lam2, res=1e-3):
    """Brute-force minimizer of the objective over the simplex lattice.

    Two-dimensional lattices at ``res`` are enumerated directly. For n = 4 a
    0.02 lattice locates the basin, then a ``res`` lattice over a box of
    +-0.04 around it finishes the search.
    """
    n = len(s)
    if n <= 3:
        pts = simplex_grid(n, res)
    else:
        coarse = simplex_grid(n, 0.02)
        best = coarse[np.argmin(objective(coarse, s, a, lam1, lam2))]
        pts = simplex_grid(n, res, best[:-1] - 0.04, best[:-1] + 0.04)
    vals = objective(pts, s, a, lam1, lam2)
    i = int(np.argmin(vals))
    return pts[i], float(vals[i])


def alternating_minimization(votes, activations, lam1, lam2, iterations=100):
    """Plain-numpy reference of the pose / compatibility alternation with
    cosine similarity."""
    v = np.asarray(votes, dtype=np.float64)
    a = np.clip(np.asarray(activations, dtype=np.float64), 1e-6, 1.0)
    c = np.full(len(v), 1.0 / len(v))
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    temp = lam1 + lam2
    for _ in range(iterations):
        mu = (c[:, None] * v).sum(0) / c.sum()
        sim = vn @ (mu / np.linalg.norm(mu))
        logits = sim / temp + (lam2 / temp) * np.log(a)
        logits -= logits.max()
        c = np.exp(logits) / np.exp(logits).sum()
    mu = (c[:, None] * v).sum(0) / c.sum()
    return c, mu


def brute_force_windows(h, w, ch, k, s):
    groups = []
    for i, j in itertools.product(range(0, h - k + 1, s), range(0, w - k + 1, s)):
        members = [(r * w + q) * ch + c for r in range(i, i + k) for q in range(j, j + k) for c in range(ch)]
        groups.append(members)
    return groups
