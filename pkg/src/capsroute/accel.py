"""Hot numeric kernels with a numba path and a pure-numpy fallback.

``CAPSROUTE_NUMBA`` selects the path: ``1`` forces numba, ``0`` forces numpy
and ``auto`` (the default) picks per kernel from ``AUTO_PREFERENCE``. Both
paths compute the same quantities.

Kernels
-------
window_gather / window_scatter
    im2col / col2im over the two spatial axes of a channels-last array.
gm_forward / gm_backward
    Gaussian-mixture similarity of squared distances.
lstm_forward / lstm_backward
    Pointwise part of an LSTM cell (gates already pre-activated).
"""

import os
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_MODES = ("auto", "numba", "numpy")

# Path taken by ``auto`` for each kernel, from benchmarks/bench_kernels.py.
# Without SVML numba calls scalar libm for exp/tanh while numpy uses vector
# loops, so forward passes that are dominated by transcendentals stay on
# numpy. Backward passes are pure arithmetic and gain from fusion.
AUTO_PREFERENCE = {
    "window_gather": "numpy",
    "window_scatter": "numba",
    "gm_forward": "numpy",
    "gm_backward": "numba",
    "lstm_forward": "numpy",
    "lstm_backward": "numba",
}


def _mode_from_env():
    raw = os.environ.get("CAPSROUTE_NUMBA", "auto").strip().lower()
    mode = {"1": "numba", "0": "numpy", "true": "numba", "false": "numpy"}.get(raw, raw)
    if mode not in _MODES:
        raise ValueError(f"CAPSROUTE_NUMBA must be one of auto, 1, 0; got {raw!r}")
    if numba is None and mode != "numpy":
        mode = "numpy"
    return mode


_MODE = _mode_from_env()


def get_backend():
    return _MODE


def set_backend(mode):
    """Select ``auto``, ``numba`` or ``numpy``. Returns the previous mode."""
    global _MODE
    if mode not in _MODES:
        raise ValueError(f"unknown backend {mode!r}")
    if mode == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    prev = _MODE
    _MODE = mode
    return prev


@contextmanager
def backend(mode):
    prev = set_backend(mode)
    try:
        yield
    finally:
        set_backend(prev)


def numba_enabled(kernel):
    """True when ``kernel`` (a key of ``AUTO_PREFERENCE``) runs through numba."""
    if numba is None or _MODE == "numpy":
        return False
    if _MODE == "numba":
        return True
    return AUTO_PREFERENCE[kernel] == "numba"


# --------------------------------------------------------------------------
# window gather / scatter
# --------------------------------------------------------------------------

def _np_window_gather(x, k, s):
    b, h, w, f = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    # (B, Ho, Wo, F, K, K) -> (B, Ho, Wo, K, K, F)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _np_window_scatter(g, h, w, s):
    b, ho, wo, k, _, f = g.shape
    out = np.zeros((b, h, w, f), dtype=g.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + s * (ho - 1) + 1:s, kj:kj + s * (wo - 1) + 1:s, :] += g[:, :, :, ki, kj, :]
    return out


if numba is not None:

    @njit(cache=True)
    def _nb_window_gather(x, k, s):
        b, h, w, f = x.shape
        ho = (h - k) // s + 1
        wo = (w - k) // s + 1
        out = np.empty((b, ho, wo, k, k, f), dtype=x.dtype)
        for n in range(b):
            for i in range(ho):
                for j in range(wo):
                    for ki in range(k):
                        for kj in range(k):
                            out[n, i, j, ki, kj, :] = x[n, i * s + ki, j * s + kj, :]
        return out

    @njit(cache=True)
    def _nb_window_scatter(g, h, w, s):
        b, ho, wo, k, _, f = g.shape
        out = np.zeros((b, h, w, f), dtype=g.dtype)
        for n in range(b):
            for i in range(ho):
                for j in range(wo):
                    for ki in range(k):
                        for kj in range(k):
                            row = out[n, i * s + ki, j * s + kj]
                            src = g[n, i, j, ki, kj]
                            for c in range(f):
                                row[c] += src[c]
        return out


def window_gather(x, k, s):
    """(B, H, W, F) -> (B, Ho, Wo, K, K, F) with valid windows."""
    if numba_enabled("window_gather"):
        return _nb_window_gather(np.ascontiguousarray(x), k, s)
    return _np_window_gather(x, k, s)


def window_scatter(g, h, w, s):
    """Adjoint of :func:`window_gather`: sums window entries back onto the grid."""
    if numba_enabled("window_scatter"):
        return _nb_window_scatter(np.ascontiguousarray(g), h, w, s)
    return _np_window_scatter(g, h, w, s)


# --------------------------------------------------------------------------
# Gaussian-mixture similarity  sim = sum_q t1[q] exp(-d2 / (2 t2[q]^2))
# --------------------------------------------------------------------------

def _np_gm_forward(d2, t1, t2):
    e = np.exp(d2[..., None] * (-0.5 / (t2 * t2)))
    return e @ t1


def _np_gm_backward(g, d2, t1, t2):
    inv = 1.0 / (t2 * t2)
    e = np.exp(d2[..., None] * (-0.5 * inv))
    we = e * t1
    g_d2 = g * (we @ (-0.5 * inv))
    gf = g.reshape(-1)
    g_t1 = gf @ e.reshape(-1, t1.shape[0])
    g_t2 = (gf * d2.reshape(-1)) @ we.reshape(-1, t1.shape[0]) * (inv / t2)
    return g_d2, g_t1, g_t2


if numba is not None:

    @njit(cache=True)
    def _nb_gm_forward(d2, t1, t2):
        flat = d2.reshape(-1)
        q = t1.shape[0]
        coef = -0.5 / (t2 * t2)
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            acc = 0.0
            for j in range(q):
                acc += t1[j] * np.exp(flat[i] * coef[j])
            out[i] = acc
        return out.reshape(d2.shape)

    @njit(cache=True)
    def _nb_gm_backward(g, d2, t1, t2):
        flat = d2.reshape(-1)
        gf = g.reshape(-1)
        q = t1.shape[0]
        inv = 1.0 / (t2 * t2)
        coef = -0.5 * inv
        g_d2 = np.empty_like(flat)
        g_t1 = np.zeros(q, dtype=np.float64)
        g_t2 = np.zeros(q, dtype=np.float64)
        for i in range(flat.shape[0]):
            acc = 0.0
            for j in range(q):
                e = np.exp(flat[i] * coef[j])
                we = t1[j] * e
                acc += we * coef[j]
                g_t1[j] += gf[i] * e
                g_t2[j] += gf[i] * flat[i] * we
            g_d2[i] = gf[i] * acc
        g_t2 = g_t2 * inv / t2
        return g_d2.reshape(d2.shape), g_t1.astype(t1.dtype), g_t2.astype(t2.dtype)


def gm_forward(d2, t1, t2):
    if numba_enabled("gm_forward"):
        return _nb_gm_forward(np.ascontiguousarray(d2), t1, t2)
    return _np_gm_forward(d2, t1, t2)


def gm_backward(g, d2, t1, t2):
    """Returns gradients with respect to (d2, t1, t2)."""
    if numba_enabled("gm_backward"):
        return _nb_gm_backward(np.ascontiguousarray(g), np.ascontiguousarray(d2), t1, t2)
    return _np_gm_backward(g, d2, t1, t2)


# --------------------------------------------------------------------------
# LSTM pointwise cell. Gate order along the last axis of z: i, f, o, g.
# --------------------------------------------------------------------------

def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_lstm_forward(z, s_prev):
    hdim = s_prev.shape[-1]
    gates = np.empty_like(z)
    sg = gates[..., :3 * hdim]
    # sigmoid(x) = 0.5 tanh(x / 2) + 0.5 keeps everything in SIMD ufuncs
    np.multiply(z[..., :3 * hdim], 0.5, out=sg)
    np.tanh(sg, out=sg)
    sg *= 0.5
    sg += 0.5
    np.tanh(z[..., 3 * hdim:], out=gates[..., 3 * hdim:])
    i = gates[..., :hdim]
    f = gates[..., hdim:2 * hdim]
    o = gates[..., 2 * hdim:3 * hdim]
    c = gates[..., 3 * hdim:]
    s = f * s_prev
    s += i * c
    ts = np.tanh(s)
    h = o * ts
    return h, s, gates, ts


def _np_lstm_backward(gh, gs, s_prev, gates, ts):
    hdim = s_prev.shape[-1]
    i = gates[..., :hdim]
    f = gates[..., hdim:2 * hdim]
    o = gates[..., 2 * hdim:3 * hdim]
    c = gates[..., 3 * hdim:]
    dts = 1.0 - ts * ts
    dts *= o
    dts *= gh
    dts += gs
    gs = dts
    gz = np.empty_like(gates)
    t = gz[..., :hdim]
    np.subtract(1.0, i, out=t)
    t *= i
    t *= c
    t *= gs
    t = gz[..., hdim:2 * hdim]
    np.subtract(1.0, f, out=t)
    t *= f
    t *= s_prev
    t *= gs
    t = gz[..., 2 * hdim:3 * hdim]
    np.subtract(1.0, o, out=t)
    t *= o
    t *= ts
    t *= gh
    t = gz[..., 3 * hdim:]
    np.multiply(c, c, out=t)
    np.subtract(1.0, t, out=t)
    t *= i
    t *= gs
    return gz, gs * f


if numba is not None:

    @njit(cache=True)
    def _nb_sig(x):
        if x >= 0:
            return 1.0 / (1.0 + np.exp(-x))
        ex = np.exp(x)
        return ex / (1.0 + ex)

    @njit(cache=True)
    def _nb_lstm_forward(z, s_prev):
        m = s_prev.shape[0]
        hdim = s_prev.shape[1]
        gates = np.empty_like(z)
        h = np.empty_like(s_prev)
        s = np.empty_like(s_prev)
        ts = np.empty_like(s_prev)
        for r in range(m):
            for k in range(hdim):
                i = _nb_sig(z[r, k])
                f = _nb_sig(z[r, hdim + k])
                o = _nb_sig(z[r, 2 * hdim + k])
                c = np.tanh(z[r, 3 * hdim + k])
                gates[r, k] = i
                gates[r, hdim + k] = f
                gates[r, 2 * hdim + k] = o
                gates[r, 3 * hdim + k] = c
                sv = f * s_prev[r, k] + i * c
                t = np.tanh(sv)
                s[r, k] = sv
                ts[r, k] = t
                h[r, k] = o * t
        return h, s, gates, ts

    @njit(cache=True)
    def _nb_lstm_backward(gh, gs_in, s_prev, gates, ts):
        m = s_prev.shape[0]
        hdim = s_prev.shape[1]
        gz = np.empty_like(gates)
        gprev = np.empty_like(s_prev)
        for r in range(m):
            for k in range(hdim):
                i = gates[r, k]
                f = gates[r, hdim + k]
                o = gates[r, 2 * hdim + k]
                c = gates[r, 3 * hdim + k]
                t = ts[r, k]
                gs = gs_in[r, k] + gh[r, k] * o * (1.0 - t * t)
                gz[r, k] = gs * c * i * (1.0 - i)
                gz[r, hdim + k] = gs * s_prev[r, k] * f * (1.0 - f)
                gz[r, 2 * hdim + k] = gh[r, k] * t * o * (1.0 - o)
                gz[r, 3 * hdim + k] = gs * i * (1.0 - c * c)
                gprev[r, k] = gs * f
        return gz, gprev


def lstm_forward(z, s_prev):
    """Returns (h, s, gates, tanh(s)); the last two are backward caches."""
    if numba_enabled("lstm_forward"):
        hdim = s_prev.shape[-1]
        lead = s_prev.shape[:-1]
        h, s, gates, ts = _nb_lstm_forward(
            np.ascontiguousarray(z).reshape(-1, 4 * hdim),
            np.ascontiguousarray(s_prev).reshape(-1, hdim))
        return (h.reshape(lead + (hdim,)), s.reshape(lead + (hdim,)),
                gates.reshape(lead + (4 * hdim,)), ts.reshape(lead + (hdim,)))
    return _np_lstm_forward(z, s_prev)


def lstm_backward(gh, gs, s_prev, gates, ts):
    """Returns gradients with respect to (z, s_prev)."""
    if numba_enabled("lstm_backward"):
        hdim = s_prev.shape[-1]
        lead = s_prev.shape[:-1]
        flat = lambda a, w: np.ascontiguousarray(a).reshape(-1, w)  # noqa: E731
        gz, gp = _nb_lstm_backward(flat(gh, hdim), flat(gs, hdim), flat(s_prev, hdim),
                                   flat(gates, 4 * hdim), flat(ts, hdim))
        return gz.reshape(lead + (4 * hdim,)), gp.reshape(lead + (hdim,))
    return _np_lstm_backward(gh, gs, s_prev, gates, ts)
