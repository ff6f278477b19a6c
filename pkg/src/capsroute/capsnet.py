"""Capsule layers and the full network.

Layout is channels-last throughout. A capsule grid holds poses of shape
(B, H, W, C, 16) (row-major flattened 4x4 matrices) and activations of shape
(B, H, W, C).
"""

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .connectionist import ConnectionistRouting
from .kernels import GaussianMixtureKernel
from .nn import BatchNorm, Conv2d, Module, uniform_init
from .routing import output_extent, route
from .similarity import SimilarityRouting

POSE = 4
POSE_DIM = POSE * POSE


@dataclass
class CapsuleGrid:
    poses: T.Tensor        # (B, H, W, C, 16)
    activations: T.Tensor  # (B, H, W, C)

    @property
    def shape(self):
        """(B, H, W, C, 4*4+1) as reported for packed capsules."""
        return tuple(self.activations.shape) + (POSE_DIM + 1,)

    def packed(self):
        return np.concatenate([self.poses.data, self.activations.data[..., None]], -1)


def normalized_weights(w):
    """W / ||W||_F for every 4x4 matrix in ``w`` (..., 4, 4)."""
    norm = T.frobenius_norm(w, keepdims=True)
    if np.any(norm.data < 1e-8):
        raise T.DomainError("transform matrix with vanishing Frobenius norm")
    return w / norm


def transform_votes(poses, weights):
    """v[b, p, o, n] = (W[n, o] / ||W[n, o]||_F) @ P[b, p, n].

    ``poses`` is (B, P, N, 4, 4), ``weights`` (N, O, 4, 4); returns
    (B, P, O, N, 16).
    """
    if poses.shape[-2:] != (POSE, POSE) or weights.shape[-2:] != (POSE, POSE) or poses.shape[2] != weights.shape[0]:
        raise T.ShapeError(f"transform_votes: poses {poses.shape} vs weights {weights.shape}")
    v = T.einsum("noij,bpnjk->bponik", normalized_weights(weights), poses)
    b, p, o, n = v.shape[:4]
    return T.reshape(v, (b, p, o, n, POSE_DIM))


VOTE_SCALE_FLOOR = 1e-12


def rescale_votes(votes):
    """Divide each receptive field's votes (..., N, 16) by their RMS length.

    The normalized transform cannot grow a pose and the weighted mean of
    disagreeing votes shrinks it, so without this the pose scale decays by
    roughly an order of magnitude per routed layer.
    """
    ms = T.mean(T.sum_(T.square(votes), -1, keepdims=True), -2, keepdims=True)
    return votes / T.sqrt(ms + VOTE_SCALE_FLOOR)


def make_procedure(name, channels, layer_index, cfg, rng):
    if name == "similarity":
        q = cfg.kernel_components[layer_index]
        return SimilarityRouting(channels, GaussianMixtureKernel(q))
    if name == "connectionist":
        return ConnectionistRouting(POSE_DIM, cfg.lstm_hidden, cfg.f_hidden[layer_index],
                                    cfg.g_hidden[layer_index], rng)
    raise ValueError(f"unknown routing procedure {name!r}")


class PrimaryCapsules(Module):
    """1x1 convolution producing 16 pose entries and one sigmoid activation
    per capsule channel."""

    def __init__(self, c_in, channels, rng):
        self.channels = channels
        self.weight = T.parameter(uniform_init(rng, c_in, (c_in, channels * (POSE_DIM + 1))), name="weight")
        self.bias = T.parameter(np.zeros(channels * (POSE_DIM + 1)), name="bias")

    def __call__(self, features):
        b, h, w, c = features.shape
        if c != self.weight.shape[0]:
            raise T.ShapeError(f"primary capsules expect {self.weight.shape[0]} features, got {c}")
        y = T.matmul(T.reshape(features, (b * h * w, c)), self.weight) + T.reshape(self.bias, (1, -1))
        y = T.reshape(y, (b, h, w, self.channels, POSE_DIM + 1))
        return CapsuleGrid(y[..., :POSE_DIM], T.sigmoid(y[..., POSE_DIM]))


class ConvCapsules(Module):
    """Convolutional capsule layer: valid K x K windows, transform matrices
    shared across positions, routing per (position, output channel)."""

    def __init__(self, c_in, c_out, k, s, procedure, rng, iterations=3, scale_votes=True):
        self.c_in, self.c_out, self.k, self.s = c_in, c_out, k, s
        self.iterations = iterations
        self.scale_votes = scale_votes
        self.weight = T.parameter(rng.standard_normal((k * k * c_in, c_out, POSE, POSE)), name="W")
        self.routing = procedure

    def votes(self, grid):
        b, h, w, c = grid.activations.shape
        if c != self.c_in:
            raise T.ShapeError(f"conv capsules expect {self.c_in} channels, got {c}")
        k, s = self.k, self.s
        poses = T.window_gather(T.reshape(grid.poses, (b, h, w, c * POSE_DIM)), k, s)
        ho, wo = poses.shape[1], poses.shape[2]
        n = k * k * c
        poses = T.reshape(poses, (b, ho * wo, n, POSE, POSE))
        acts = T.reshape(T.window_gather(grid.activations, k, s), (b, ho * wo, 1, n))
        votes = transform_votes(poses, self.weight)
        return (rescale_votes(votes) if self.scale_votes else votes), acts, (ho, wo)

    def __call__(self, grid):
        votes, acts, (ho, wo) = self.votes(grid)
        out = route(votes, acts, self.routing, self.iterations)
        b = votes.shape[0]
        return CapsuleGrid(T.reshape(out.pose, (b, ho, wo, self.c_out, POSE_DIM)),
                           T.reshape(out.activation, (b, ho, wo, self.c_out)))


class ClassCapsules(Module):
    """All input capsules form one receptive field per class; each (input
    capsule, class) pair has its own transform matrix."""

    def __init__(self, n_in, classes, procedure, rng, iterations=3, scale_votes=True):
        self.n_in, self.classes = n_in, classes
        self.iterations = iterations
        self.scale_votes = scale_votes
        self.weight = T.parameter(rng.standard_normal((n_in, classes, POSE, POSE)), name="W")
        self.routing = procedure

    def __call__(self, grid):
        b, h, w, c = grid.activations.shape
        n = h * w * c
        if n != self.n_in:
            raise T.ShapeError(f"class capsules expect {self.n_in} input capsules, got {n}")
        poses = T.reshape(grid.poses, (b, 1, n, POSE, POSE))
        acts = T.reshape(grid.activations, (b, 1, 1, n))
        votes = transform_votes(poses, self.weight)
        if self.scale_votes:
            votes = rescale_votes(votes)
        out = route(votes, acts, self.routing, self.iterations)
        return CapsuleGrid(T.reshape(out.pose, (b, 1, 1, self.classes, POSE_DIM)),
                           T.reshape(out.activation, (b, 1, 1, self.classes)))


@dataclass
class NetworkConfig:
    procedure: str = "similarity"
    num_classes: int = 5
    image_size: int = 32
    in_channels: int = 1
    conv_channels: int = 64
    conv_kernel: int = 5
    conv_stride: int = 2
    primary_channels: int = 8
    caps_channels: tuple = (16, 16)
    caps_kernels: tuple = (3, 3)
    caps_strides: tuple = (2, 1)
    iterations: int = 3
    kernel_components: tuple = (4, 4, 10)
    lstm_hidden: int = 16
    f_hidden: tuple = ((), (32, 32), (64, 64))
    g_hidden: tuple = ((), (64, 64), (124, 124))
    scale_votes: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.procedure not in ("similarity", "connectionist"):
            raise ValueError(f"unknown routing procedure {self.procedure!r}")
        for name in ("num_classes", "image_size", "in_channels", "conv_channels", "primary_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (len(self.caps_channels) == len(self.caps_kernels) == len(self.caps_strides) == 2):
            raise ValueError("exactly two convolutional capsule layers are supported")
        if len(self.kernel_components) != 3 or len(self.f_hidden) != 3 or len(self.g_hidden) != 3:
            raise ValueError("routing hyperparameters need one entry per routed layer (3)")
        # raises ShapeError if the spatial extents do not fit
        self.spatial_extents()

    def spatial_extents(self):
        size = -(-self.image_size // self.conv_stride)
        sizes = [size, size]
        for k, s in zip(self.caps_kernels, self.caps_strides):
            size = output_extent(size, k, s)
            sizes.append(size)
        return sizes

    @classmethod
    def smallnorb(cls, procedure="similarity", **kw):
        return cls(procedure=procedure, num_classes=5, **kw)

    @classmethod
    def mnist(cls, procedure="similarity", **kw):
        return cls(procedure=procedure, num_classes=10, **kw)

    @classmethod
    def reduced(cls, procedure="similarity", num_classes=10, **kw):
        kw.setdefault("conv_channels", 32)
        kw.setdefault("primary_channels", 4)
        kw.setdefault("caps_channels", (8, 8))
        return cls(procedure=procedure, num_classes=num_classes, **kw)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class CapsNet(Module):
    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        ch1, ch2 = cfg.caps_channels
        (k1, k2), (s1, s2) = cfg.caps_kernels, cfg.caps_strides
        self.conv = Conv2d(cfg.in_channels, cfg.conv_channels, cfg.conv_kernel, cfg.conv_stride, rng)
        self.norm = BatchNorm(cfg.conv_channels)
        self.primary = PrimaryCapsules(cfg.conv_channels, cfg.primary_channels, rng)
        self.caps1 = ConvCapsules(cfg.primary_channels, ch1, k1, s1,
                                  make_procedure(cfg.procedure, ch1, 0, cfg, rng), rng, cfg.iterations,
                                  cfg.scale_votes)
        self.caps2 = ConvCapsules(ch1, ch2, k2, s2,
                                  make_procedure(cfg.procedure, ch2, 1, cfg, rng), rng, cfg.iterations,
                                  cfg.scale_votes)
        final = cfg.spatial_extents()[-1]
        self.classes = ClassCapsules(final * final * ch2, cfg.num_classes,
                                     make_procedure(cfg.procedure, cfg.num_classes, 2, cfg, rng), rng,
                                     cfg.iterations, cfg.scale_votes)

    def forward(self, images, trace=False):
        """images (B, H, W, C) -> class activations (B, O).

        With ``trace=True`` also returns [(layer name, output shape), ...].
        """
        x = images if isinstance(images, T.Tensor) else T.tensor(images)
        if x.ndim != 4 or x.shape[1:] != (self.cfg.image_size, self.cfg.image_size, self.cfg.in_channels):
            raise T.ShapeError(f"network expects (B, {self.cfg.image_size}, {self.cfg.image_size}, "
                               f"{self.cfg.in_channels}) input, got {x.shape}")
        shapes = [("input", x.shape)]
        feats = self.norm(T.relu(self.conv(x)))
        shapes.append(("conv+relu+batchnorm", feats.shape))
        grid = self.primary(feats)
        shapes.append(("primary_capsules", grid.shape))
        grid = self.caps1(grid)
        shapes.append(("conv_capsules_1", grid.shape))
        grid = self.caps2(grid)
        shapes.append(("conv_capsules_2", grid.shape))
        grid = self.classes(grid)
        shapes.append(("class_capsules", grid.shape))
        b = x.shape[0]
        scores = T.reshape(grid.activations, (b, self.cfg.num_classes))
        self.last_output = grid
        return (scores, shapes) if trace else scores

    __call__ = forward

    def routing_parameters(self):
        names = []
        for name, _ in self.named_parameters():
            if ".routing." in name:
                names.append(name)
        return names

    def count_parameters(self, include_routing=False):
        total = 0
        for name, p in self.named_parameters():
            if include_routing or ".routing." not in name:
                total += p.size
        return total


def build_network(cfg=None, **overrides):
    if cfg is None:
        cfg = NetworkConfig(**overrides)
    elif overrides:
        cfg = NetworkConfig(**{**cfg.to_dict(), **overrides})
    return CapsNet(cfg)


def shape_trace(cfg, batch=1, seed=0):
    """Run a forward pass on random input and report per-layer shapes."""
    net = build_network(cfg)
    x = np.random.default_rng(seed).standard_normal((batch, cfg.image_size, cfg.image_size, cfg.in_channels))
    with T.no_grad():
        _, shapes = net.forward(x, trace=True)
    return shapes, net
