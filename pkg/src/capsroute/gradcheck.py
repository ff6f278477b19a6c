"""Finite-difference verification of reverse-mode gradients."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

EPS = 1e-12


class NondeterminismError(RuntimeError):
    pass


@dataclass
class GradCheckRow:
    name: str
    size: int
    checked: int
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    rows: list
    tolerance: float

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    @property
    def max_rel_error(self):
        return max((r.max_rel_error for r in self.rows), default=0.0)

    def table(self):
        lines = [f"{'parameter':<48}{'size':>8}{'checked':>9}{'rel err':>12}  result"]
        for r in self.rows:
            lines.append(f"{r.name:<48}{r.size:>8}{r.checked:>9}{r.max_rel_error:>12.3e}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), EPS)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _value(fn):
    with T.no_grad():
        out = fn()
    if out.size != 1:
        raise T.ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(fn, params, step=1e-5, tolerance=1e-4, max_coords=None, seed=0, steps=None):
    """Compare analytic gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and returns a scalar tensor computed from
    ``params``: a tensor, a list of tensors or a ``{name: tensor}`` mapping.
    Every parameter must require grad. When ``max_coords`` is set, at most
    that many entries per parameter are perturbed, drawn with ``seed``.
    ``steps`` maps parameter names to a step overriding ``step``.

    The relative error of a parameter is
    ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, 1e-12)``
    over the checked entries.
    """
    steps = dict(steps or {})
    if step <= 0 or any(v <= 0 for v in steps.values()):
        raise ValueError("step must be positive")
    if isinstance(params, T.Tensor):
        params = {params.name or "x": params}
    elif not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"parameter {name!r} does not require grad")

    first, second = _value(fn), _value(fn)
    if first != second:
        raise NondeterminismError(f"two evaluations disagree: {first!r} vs {second!r}")

    for p in params.values():
        p.grad = None
    with T.Tape() as tape:
        loss = fn()
        T.backward(loss, tape)

    rng = np.random.default_rng(seed)
    rows = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"parameter {name!r} is not contiguous")
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        h = steps.get(name, step)
        numeric = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            up = _value(fn)
            flat[k] = orig - h
            down = _value(fn)
            flat[k] = orig
            numeric[j] = (up - down) / (2 * h)
        err = relative_error(analytic.reshape(-1)[idx], numeric)
        rows.append(GradCheckRow(name, flat.size, len(idx), err, err < tolerance))
    return GradCheckReport(rows, tolerance)


# ---------------------------------------------------------------------------
# whole-network check on a tiny configuration
# ---------------------------------------------------------------------------

PARAMETER_CLASSES = (
    ("kernel", ("kernel.weight_free", "kernel.bandwidth_free")),
    ("lambda", ("lambda1_free", "lambda2_free")),
    ("beta", ("beta1_free", "beta2_free", "beta3")),
    ("lstm", ("cell.weight", "cell.bias")),
    ("mlp", ("f_theta.", "g_beta.")),
    ("transform", ("caps1.weight", "caps2.weight", "classes.weight")),
    ("conv", ("conv.weight", "conv.bias", "primary.weight", "primary.bias")),
    ("batchnorm", ("norm.gamma", "norm.beta")),
)


def parameter_class(name):
    for cls, keys in PARAMETER_CLASSES:
        if any(k in name for k in keys):
            return cls
    return "other"


def tiny_network_config(procedure, iterations=3, seed=0):
    from .capsnet import NetworkConfig

    # 16x16 input -> 8x8 features -> 3x3 -> 1x1 capsules -> 3 classes
    return NetworkConfig(procedure=procedure, num_classes=3, image_size=16, conv_channels=4,
                         primary_channels=2, caps_channels=(2, 2), iterations=iterations,
                         kernel_components=(2, 2, 3), lstm_hidden=4,
                         f_hidden=((), (3,), (3,)), g_hidden=((), (3,), (3,)), seed=seed)


def network_gradcheck(procedure, seed=0, iterations=3, batch=2, step=1e-5, tolerance=1e-4,
                      max_coords=6, routing_step=1e-3):
    """Check every parameter of a tiny routed network at 64-bit.

    The scalar is a fixed random projection of the class activations, which
    keeps the function smooth (no margin kinks). Routing parameters are
    jittered and the primary weights enlarged so the check runs at a generic
    point: at the symmetric initialization some gradients (e.g. of the KL
    gain) are near 1e-8 and finite differences drown in roundoff.
    """
    from .capsnet import build_network

    with T.precision(64):
        net = build_network(tiny_network_config(procedure, iterations, seed))
        net.train()
        rng = np.random.default_rng(seed + 1)
        if procedure == "similarity":
            for name, p in net.named_parameters():
                if ".routing." in name:
                    p.data += rng.normal(0.0, 0.5, p.shape)
        net.primary.weight.data *= 4.0
        x = T.tensor(rng.standard_normal((batch, 16, 16, 1)))
        proj = T.tensor(rng.standard_normal((batch, net.cfg.num_classes)))

        def fn():
            return T.sum_(net(x) * proj)

        params = dict(net.named_parameters())
        steps = {}
        if procedure == "similarity":
            steps = {n: routing_step for n in params if ".routing." in n}
        return grad_check(fn, params, step=step, tolerance=tolerance, max_coords=max_coords,
                          seed=seed, steps=steps)
