"""The TSP transformer: parameters, batch-norm statistics and the forward API."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from .encoder import encode, init_encoder_params, init_encoder_stats
from .tensor import RunningStats, Tensor


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    heads: int = 8
    enc_layers: int = 6
    dec_layers: int = 2
    d_ff: int = 512
    clip: float = 10.0

    def __post_init__(self):
        for name in ("d", "heads", "enc_layers", "dec_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by the number of heads h={self.heads}")
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if not self.clip > 0:
            raise ValueError(f"clip constant C must be positive, got {self.clip}")


class TSPModel:
    """Encoder/decoder weights plus the encoder's running batch-norm statistics."""

    def __init__(self, config: ModelConfig, params: dict, stats: dict):
        self.config = config
        self.params = params
        self.stats = stats

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "TSPModel":
        rng = np.random.Generator(np.random.PCG64(seed))
        params = init_encoder_params(config, rng, dtype)
        params.update(dec.init_decoder_params(config, rng, dtype))
        return cls(config, params, init_encoder_stats(config, dtype))

    @property
    def dtype(self):
        return self.params["enc.embed.W"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encode(self, coords, training: bool = False) -> Tensor:
        return encode(coords, self.params, self.stats, self.config, training)

    def start(self, enc: Tensor) -> dec.DecodeState:
        return dec.start_state(enc, self.params, self.config)

    def step(self, state: dec.DecodeState) -> dec.StepDistribution:
        return dec.decode_step(state, self.params, self.config)

    def sequence_log_prob(self, enc: Tensor, tours) -> Tensor:
        return dec.sequence_log_prob(enc, self.params, self.config, tours)

    def seed_stats(self, coords) -> None:
        """Set the running statistics from one training-mode pass over ``coords``."""
        for s in self.stats.values():
            s.initialized = False
        self.encode(coords, training=True)

    @property
    def stats_ready(self) -> bool:
        return all(s.initialized for s in self.stats.values())

    def clone(self) -> "TSPModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return TSPModel(self.config, params, {k: s.copy() for k, s in self.stats.items()})

    def load_from(self, other: "TSPModel") -> None:
        """Copy weights and statistics from a model of identical shape."""
        if other.config != self.config:
            raise ValueError("cannot copy between models with different configurations")
        for k, v in other.params.items():
            self.params[k].data = v.data.copy()
        self.stats = {k: s.copy() for k, s in other.stats.items()}

    def astype(self, dtype) -> "TSPModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        stats = {}
        for k, s in self.stats.items():
            c = RunningStats(s.mean.shape[0], dtype)
            c.mean, c.var, c.initialized = s.mean.astype(dtype), s.var.astype(dtype), s.initialized
            stats[k] = c
        return TSPModel(self.config, params, stats)
