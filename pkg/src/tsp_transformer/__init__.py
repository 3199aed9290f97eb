"""Transformer policy for the Euclidean TSP, trained with REINFORCE."""
from .model import ModelConfig, TSPModel
from .search import beam_search, greedy_decode, sample_decode
from .training import TrainConfig, Trainer, train
from .tsp import Instance, Tour, generate, tour_length

__all__ = [
    "Instance",
    "ModelConfig",
    "TSPModel",
    "Tour",
    "TrainConfig",
    "Trainer",
    "beam_search",
    "generate",
    "greedy_decode",
    "sample_decode",
    "tour_length",
    "train",
]
