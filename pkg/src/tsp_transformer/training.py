"""REINFORCE training with a greedy-rollout baseline.

Each step samples one tour per instance from the policy and greedily decodes
the baseline network on the same instances; the policy gradient is weighted by
``length(sample) - length(baseline)``. At the end of every epoch both networks
are decoded greedily on a fixed evaluation set, and the baseline becomes a copy
of the policy when the policy's mean tour length is strictly shorter.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from . import tensor as T
from .model import ModelConfig, TSPModel
from .search import NonFiniteError, rollout
from .tensor import Tape, Tensor, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "mean_sample_len", "mean_greedy_len", "baseline_len", "promoted"]

DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n: int = 10
    batch_size: int = 64
    steps_per_epoch: int = 200
    epochs: int = 20
    learning_rate: float = 1e-4
    d: int = 128
    heads: int = 8
    enc_layers: int = 6
    dec_layers: int = 2
    d_ff: int = 512
    clip: float = 10.0
    baseline_eval_size: int = 1000
    seed: int = 1234
    optimizer: str = "adam"
    grad_clip: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("n", "batch_size", "steps_per_epoch", "baseline_eval_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n < 3:
            raise ValueError(f"n must be >= 3, got {self.n}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        self.model_config()  # validates d, heads, ...

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d, self.heads, self.enc_layers, self.dec_layers, self.d_ff, self.clip)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


class SGD:
    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p in self.params.values():
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {"optim/step": np.array(self.t, dtype=np.int64)}

    def load_state(self, arrays: dict) -> None:
        self.t = int(arrays["optim/step"])


class Adam(SGD):
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def state(self) -> dict:
        out = super().state()
        for k in self.params:
            out[f"optim/m/{k}"] = self.m[k]
            out[f"optim/v/{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict) -> None:
        super().load_state(arrays)
        for k in self.params:
            self.m[k] = arrays[f"optim/m/{k}"].copy()
            self.v[k] = arrays[f"optim/v/{k}"].copy()


def make_optimizer(name: str, params: dict, lr: float) -> SGD:
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.dtype)
    return total


@dataclass
class StepStats:
    loss: float
    mean_sample_len: float
    mean_baseline_len: float
    grad_norm: float


@dataclass
class EpochMetrics:
    epoch: int
    mean_sample_len: float
    mean_greedy_len: float
    baseline_len: float
    promoted: bool

    def row(self) -> list:
        return [self.epoch, repr(self.mean_sample_len), repr(self.mean_greedy_len),
                repr(self.baseline_len), int(self.promoted)]


def reinforce_loss(policy: TSPModel, baseline: TSPModel, coords: np.ndarray, rng: np.random.Generator):
    """Surrogate loss mean((L_sample - L_baseline) * log p(sample)); call inside a tape."""
    with no_grad():
        base = rollout(baseline, coords, "greedy", training=False)
    sample = rollout(policy, coords, "sample", rng, training=True)
    advantage = (sample.lengths - base.lengths).astype(policy.dtype)
    loss = T.mean(T.mul(Tensor(advantage), sample.log_prob))
    return loss, sample, base


def _describe(coords: np.ndarray, row: int) -> str:
    return f"instance {int(row)} (coords {coords[row].tolist()})"


def reinforce_step(policy: TSPModel, baseline: TSPModel, optimizer: SGD, coords: np.ndarray,
                   rng: np.random.Generator, grad_clip: float = 0.0) -> StepStats:
    """One policy-gradient update on a batch; only the policy's weights change."""
    optimizer.zero_grad()
    with Tape():
        try:
            loss, sample, base = reinforce_loss(policy, baseline, coords, rng)
        except NonFiniteError as exc:
            raise TrainingAbort(f"{exc}; first offending instance {_describe(coords, exc.rows[0])}") from None
        if not np.isfinite(loss.item()):
            logp = sample.log_prob.data
            bad = np.flatnonzero(~np.isfinite(logp) | ~np.isfinite(sample.lengths))
            where = _describe(coords, bad[0]) if bad.size else "unknown instance"
            raise TrainingAbort(f"non-finite loss {loss.item()} at {where}")
        loss.backward()
    norm = clip_grad_norm(policy.parameters(), grad_clip)
    optimizer.step()
    return StepStats(loss.item(), float(sample.lengths.mean()), float(base.lengths.mean()), norm)


def greedy_mean_length(model: TSPModel, coords: np.ndarray, chunk: int = 500) -> float:
    lengths = [rollout(model, coords[i : i + chunk], "greedy").lengths for i in range(0, len(coords), chunk)]
    return float(np.concatenate(lengths).mean())


def maybe_update_baseline(policy: TSPModel, baseline: TSPModel, eval_coords: np.ndarray):
    """Copy the policy into the baseline when its greedy mean length is strictly shorter.

    Returns ``(promoted, policy_mean, baseline_mean)``.
    """
    policy_mean = greedy_mean_length(policy, eval_coords)
    baseline_mean = greedy_mean_length(baseline, eval_coords)
    promoted = policy_mean < baseline_mean
    if promoted:
        baseline.load_from(policy)
    return promoted, policy_mean, baseline_mean


def _rng_to_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array([s >> 64, s & mask, inc >> 64, inc & mask, st["has_uint32"], st["uinteger"]], dtype=np.uint64)


def _rng_from_array(arr: np.ndarray) -> np.random.Generator:
    a = [int(x) for x in arr]
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": (a[0] << 64) | a[1], "inc": (a[2] << 64) | a[3]},
        "has_uint32": a[4],
        "uinteger": a[5],
    }
    return np.random.Generator(bg)


class Trainer:
    """Holds everything needed to continue training bit-for-bit."""

    def __init__(self, config: TrainConfig, policy: TSPModel, baseline: TSPModel, optimizer: SGD,
                 rngs: dict, eval_coords: np.ndarray, epoch: int = 0, step: int = 0):
        self.config = config
        self.policy = policy
        self.baseline = baseline
        self.optimizer = optimizer
        self.rngs = rngs
        self.eval_coords = eval_coords
        self.epoch = epoch
        self.step_count = step
        self._epoch_sample_lens: list[float] = []

    @classmethod
    def create(cls, config: TrainConfig) -> "Trainer":
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        rngs = {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(("data", "sample", "eval"), seeds[1:])}
        init_seed = int(seeds[0].generate_state(1)[0])
        policy = TSPModel.init(config.model_config(), init_seed, config.np_dtype)
        policy.seed_stats(rngs["data"].random((config.batch_size, config.n, 2)))
        baseline = policy.clone()
        optimizer = make_optimizer(config.optimizer, policy.params, config.learning_rate)
        eval_coords = rngs["eval"].random((config.baseline_eval_size, config.n, 2))
        return cls(config, policy, baseline, optimizer, rngs, eval_coords)

    def train_step(self) -> StepStats:
        coords = self.rngs["data"].random((self.config.batch_size, self.config.n, 2))
        stats = reinforce_step(self.policy, self.baseline, self.optimizer, coords, self.rngs["sample"],
                               self.config.grad_clip)
        self.step_count += 1
        self._epoch_sample_lens.append(stats.mean_sample_len)
        return stats

    def end_epoch(self) -> EpochMetrics:
        promoted, policy_mean, baseline_mean = maybe_update_baseline(self.policy, self.baseline, self.eval_coords)
        if promoted:
            self.eval_coords = self.rngs["eval"].random(self.eval_coords.shape)
        sample_mean = float(np.mean(self._epoch_sample_lens)) if self._epoch_sample_lens else float("nan")
        self._epoch_sample_lens = []
        self.epoch += 1
        return EpochMetrics(self.epoch, sample_mean, policy_mean, baseline_mean, promoted)

    def run_epoch(self, on_step: Optional[Callable[[int, StepStats], None]] = None) -> EpochMetrics:
        for _ in range(self.config.steps_per_epoch):
            stats = self.train_step()
            if on_step is not None:
                on_step(self.step_count, stats)
        return self.end_epoch()

    def state_arrays(self) -> dict:
        out = {
            "config": np.frombuffer(self.config.to_json().encode("utf-8"), dtype=np.uint8),
            "epoch": np.array(self.epoch, dtype=np.int64),
            "step": np.array(self.step_count, dtype=np.int64),
            "eval/coords": np.asarray(self.eval_coords, dtype=np.float64),
            "epoch/sample_lens": np.asarray(self._epoch_sample_lens, dtype=np.float64),
        }
        for name, rng in self.rngs.items():
            out[f"rng/{name}"] = _rng_to_array(rng)
        for tag, model in (("policy", self.policy), ("baseline", self.baseline)):
            for k, p in model.params.items():
                out[f"{tag}/{k}"] = p.data
            for k, s in model.stats.items():
                out[f"{tag}.stats/{k}.mean"] = s.mean
                out[f"{tag}.stats/{k}.var"] = s.var
                out[f"{tag}.stats/{k}.init"] = np.array(s.initialized)
        out.update(self.optimizer.state())
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "Trainer":
        config = TrainConfig.from_json(arrays["config"].tobytes().decode("utf-8"))
        models = []
        for tag in ("policy", "baseline"):
            model = TSPModel.init(config.model_config(), 0, config.np_dtype)
            for k, p in model.params.items():
                p.data = arrays[f"{tag}/{k}"].copy()
            for k, s in model.stats.items():
                s.mean = arrays[f"{tag}.stats/{k}.mean"].copy()
                s.var = arrays[f"{tag}.stats/{k}.var"].copy()
                s.initialized = bool(arrays[f"{tag}.stats/{k}.init"])
            models.append(model)
        policy, baseline = models
        optimizer = make_optimizer(config.optimizer, policy.params, config.learning_rate)
        optimizer.load_state(arrays)
        rngs = {name: _rng_from_array(arrays[f"rng/{name}"]) for name in ("data", "sample", "eval")}
        trainer = cls(config, policy, baseline, optimizer, rngs, arrays["eval/coords"].copy(),
                      int(arrays["epoch"]), int(arrays["step"]))
        trainer._epoch_sample_lens = arrays["epoch/sample_lens"].tolist()
        return trainer

    def save(self, path) -> None:
        checkpoint.save(self.state_arrays(), path)

    @classmethod
    def load(cls, path) -> "Trainer":
        return cls.from_arrays(checkpoint.load(path))


def save_checkpoint(trainer: Trainer, path) -> None:
    trainer.save(path)


def load_checkpoint(path) -> Trainer:
    return Trainer.load(path)


def load_policy(path) -> TSPModel:
    """Only the policy network of a checkpoint, for inference."""
    return Trainer.load(path).policy


def train(config: TrainConfig, trainer: Optional[Trainer] = None,
          on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
          on_step: Optional[Callable[[int, StepStats], None]] = None):
    """Run ``config.epochs`` epochs (counting those already done by ``trainer``).

    Returns the trainer and the list of per-epoch metrics produced by this call.
    """
    trainer = trainer or Trainer.create(config)
    metrics = []
    while trainer.epoch < config.epochs:
        m = trainer.run_epoch(on_step)
        log.info("epoch %d: sample %.4f greedy %.4f baseline %.4f promoted=%s",
                 m.epoch, m.mean_sample_len, m.mean_greedy_len, m.baseline_len, m.promoted)
        metrics.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return trainer, metrics


def write_metrics(metrics, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for m in metrics:
            writer.writerow(m.row())


def read_metrics(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [EpochMetrics(int(r[0]), float(r[1]), float(r[2]), float(r[3]), bool(int(r[4]))) for r in reader]
