"""Parameter containers and the plain (non-capsule) layers."""

import numpy as np

from . import tensor as T


class Module:
    """Anything holding parameters as attributes, or in lists of modules."""

    training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, T.Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Non-trainable arrays that belong in a checkpoint (e.g. running stats)."""
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = T.parameter(uniform_init(rng, n_in, (n_in, n_out)), name="weight")
        self.bias = T.parameter(uniform_init(rng, n_in, (n_out,)), name="bias")

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + T.reshape(self.bias, (1,) * (y.ndim - 1) + (-1,))


class MLP(Module):
    """Rectifier hidden layers followed by a single sigmoid output unit."""

    def __init__(self, n_in, hidden, rng):
        sizes = [n_in, *hidden, 1]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return T.sigmoid(self.layers[-1](x))


def same_padding(size, k, s):
    """TF-style SAME padding: returns (before, after, output size)."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2, out


class Conv2d(Module):
    """Channels-last 2-D convolution with SAME padding via im2col."""

    def __init__(self, c_in, c_out, k, s, rng):
        self.k, self.s = k, s
        fan_in = k * k * c_in
        self.weight = T.parameter(uniform_init(rng, fan_in, (k, k, c_in, c_out)), name="weight")
        self.bias = T.parameter(np.zeros(c_out), name="bias")

    def __call__(self, x):
        b, h, w, c = x.shape
        k, s = self.k, self.s
        ph0, ph1, _ = same_padding(h, k, s)
        pw0, pw1, _ = same_padding(w, k, s)
        if ph0 or ph1 or pw0 or pw1:
            x = T.pad_spatial(x, (ph0, pw0), (ph1, pw1))
        cols = T.window_gather(x, k, s)
        ho, wo = cols.shape[1], cols.shape[2]
        cols = T.reshape(cols, (b * ho * wo, k * k * c))
        y = T.matmul(cols, T.reshape(self.weight, (k * k * c, -1))) + T.reshape(self.bias, (1, -1))
        return T.reshape(y, (b, ho, wo, -1))


class BatchNorm(Module):
    """Per-channel batch normalization over all but the last axis."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = T.parameter(np.ones(channels), name="gamma")
        self.beta = T.parameter(np.zeros(channels), name="beta")
        dtype = self.gamma.dtype
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x):
        axes = tuple(range(x.ndim - 1))
        shape = (1,) * (x.ndim - 1) + (-1,)
        if self.training:
            mu = T.mean(x, axes, keepdims=True)
            centered = x - mu
            var = T.mean(T.square(centered), axes, keepdims=True)
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mu.data.reshape(-1)).astype(self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var.data.reshape(-1)).astype(self.running_var.dtype)
            xhat = centered / T.sqrt(var + self.eps)
        else:
            rm = self.running_mean.reshape(shape)
            rv = self.running_var.reshape(shape)
            xhat = (x - rm) * (1.0 / np.sqrt(rv + self.eps))
        return xhat * T.reshape(self.gamma, shape) + T.reshape(self.beta, shape)
