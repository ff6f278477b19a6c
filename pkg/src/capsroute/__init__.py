"""Capsule networks with similarity-learning and connectionist routing,
on a small numpy autodiff engine."""

from .capsnet import CapsNet, NetworkConfig, build_network
from .connectionist import ConnectionistRouting
from .routing import RoutingOutcome, RoutingProcedure, route
from .similarity import SimilarityRouting, compatibility_update, solve_toy
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CapsNet", "NetworkConfig", "build_network", "ConnectionistRouting", "RoutingOutcome",
    "RoutingProcedure", "route", "SimilarityRouting", "compatibility_update", "solve_toy",
    "TrainConfig", "evaluate", "load_checkpoint", "save_checkpoint", "train",
]
