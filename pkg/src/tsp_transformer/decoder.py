"""Autoregressive tour decoder.

One decoding step turns the current partial tour into a distribution over the
unvisited cities:

1. the token for step t is the encoding of the last chosen city (the start
   token at t = 0) plus a sinusoidal position encoding of t;
2. per layer, causal self-attention over the tokens of the partial tour
   (residual + layer norm), followed by
3. attention over the city encodings with visited cities excluded
   (residual + layer norm);
4. a single-head pointer over the cities whose logits are ``C * tanh(q.k / sqrt(d))``.

Self-attention keys and values of past tokens are cached, so step t costs
O(t + n) attention work.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import attend, multi_head
from .tensor import Tensor


class DecodeError(ValueError):
    pass


def positional_encoding(t: int, d: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encoding: ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` with ``w_k = 10000^(-2k/d)``."""
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    k = np.arange(d) // 2
    angle = t / np.power(10000.0, 2.0 * k / d)
    pe = np.where(np.arange(d) % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def init_decoder_params(cfg, rng: np.random.Generator, dtype) -> dict:
    d = cfg.d

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    p = {}
    for layer in range(cfg.dec_layers):
        pre = f"dec.{layer}"
        for block in ("self", "cross"):
            for name in ("Wq", "Wk", "Wv", "Wo"):
                p[f"{pre}.{block}.{name}"] = uniform((d, d), d)
        for ln in ("ln1", "ln2"):
            p[f"{pre}.{ln}.gain"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            p[f"{pre}.{ln}.bias"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    p["dec.ptr.Wq"] = uniform((d, d), d)
    p["dec.ptr.Wk"] = uniform((d, d), d)
    return p


@dataclass(frozen=True)
class DecoderMemory:
    """Per-instance projections of the encoder output, computed once."""

    enc: Tensor
    cross_k: tuple
    cross_v: tuple
    ptr_k: Tensor

    def select(self, rows) -> "DecoderMemory":
        pick = lambda x: T.index_select(x, rows)  # noqa: E731
        return DecoderMemory(
            pick(self.enc),
            tuple(pick(k) for k in self.cross_k),
            tuple(pick(v) for v in self.cross_v),
            pick(self.ptr_k),
        )


@dataclass(frozen=True)
class DecodeState:
    """Partial tours for a batch; value semantics, never mutated.

    ``self_k``/``self_v`` hold, per decoder layer, the projected keys and
    values of tokens 0..t-1 with shape (batch, t, d).
    """

    t: int
    visited: np.ndarray
    partial: np.ndarray
    self_k: tuple
    self_v: tuple
    memory: DecoderMemory

    @property
    def n(self) -> int:
        return self.visited.shape[1]

    @property
    def batch(self) -> int:
        return self.visited.shape[0]

    def select(self, rows) -> "DecodeState":
        """Reindex the batch (beam reordering); rows may repeat."""
        rows = np.asarray(rows, dtype=np.int64)
        return DecodeState(
            self.t,
            self.visited[rows],
            self.partial[rows],
            tuple(None if k is None else T.index_select(k, rows) for k in self.self_k),
            tuple(None if v is None else T.index_select(v, rows) for v in self.self_v),
            self.memory.select(rows),
        )


@dataclass(frozen=True)
class StepDistribution:
    """Output of one decoding step.

    ``probs`` is (batch, n) and exactly zero on visited cities; ``logits`` are
    the clipped pointer scores before masking. ``new_k``/``new_v`` are the
    self-attention entries of the token just processed, consumed by
    :func:`advance`.
    """

    probs: Tensor
    logits: np.ndarray
    new_k: tuple
    new_v: tuple

    def select(self, rows) -> "StepDistribution":
        rows = np.asarray(rows, dtype=np.int64)
        return StepDistribution(
            T.index_select(self.probs, rows),
            self.logits[rows],
            tuple(T.index_select(k, rows) for k in self.new_k),
            tuple(T.index_select(v, rows) for v in self.new_v),
        )


def start_state(enc: Tensor, params: dict, cfg) -> DecodeState:
    """Empty partial tours; decoding begins from the start token (row 0)."""
    b, rows, d = enc.shape
    n = rows - 1
    cities = enc[:, 1:, :]
    cross_k = tuple(T.matmul(cities, params[f"dec.{l}.cross.Wk"]) for l in range(cfg.dec_layers))
    cross_v = tuple(T.matmul(cities, params[f"dec.{l}.cross.Wv"]) for l in range(cfg.dec_layers))
    ptr_k = T.matmul(cities, params["dec.ptr.Wk"])
    memory = DecoderMemory(enc, cross_k, cross_v, ptr_k)
    empty = tuple(None for _ in range(cfg.dec_layers))
    return DecodeState(0, np.zeros((b, n), dtype=bool), np.zeros((b, 0), dtype=np.int64), empty, empty, memory)


def step_input(state: DecodeState) -> Tensor:
    """Token for step t: H_enc[last city] + PE_t, or H_enc[start] + PE_0."""
    enc = state.memory.enc
    rows = np.zeros(state.batch, dtype=np.int64) if state.t == 0 else state.partial[:, -1] + 1
    pe = positional_encoding(state.t, enc.shape[-1], enc.dtype)
    return T.add(T.gather_rows(enc, rows), pe)


def _pointer(x: Tensor, ptr_k: Tensor, params: dict, cfg) -> Tensor:
    # x: (B, L, d) -> clipped logits (B, L, n)
    q = T.matmul(x, params["dec.ptr.Wq"])
    raw = T.scale(T.matmul(q, T.transpose(ptr_k, (0, 2, 1))), 1.0 / math.sqrt(cfg.d))
    return T.scale(T.tanh(raw), cfg.clip)


def decode_step(state: DecodeState, params: dict, cfg) -> StepDistribution:
    if state.t >= state.n:
        raise DecodeError("tour complete: no city left to decode")
    b, d = state.batch, state.memory.enc.shape[-1]
    x = T.reshape(step_input(state), (b, 1, d))
    cross_mask = state.visited[:, None, None, :]
    new_k, new_v = [], []
    for layer in range(cfg.dec_layers):
        pre = f"dec.{layer}"
        k_new = T.matmul(x, params[pre + ".self.Wk"])
        v_new = T.matmul(x, params[pre + ".self.Wv"])
        new_k.append(k_new)
        new_v.append(v_new)
        if state.t:
            keys = T.concat([state.self_k[layer], k_new], axis=1)
            values = T.concat([state.self_v[layer], v_new], axis=1)
        else:
            keys, values = k_new, v_new
        q = T.matmul(x, params[pre + ".self.Wq"])
        att = T.matmul(attend(q, keys, values, cfg.heads), params[pre + ".self.Wo"])
        x = T.layer_norm(T.add(x, att), params[pre + ".ln1.gain"], params[pre + ".ln1.bias"])

        q = T.matmul(x, params[pre + ".cross.Wq"])
        att = attend(q, state.memory.cross_k[layer], state.memory.cross_v[layer], cfg.heads, cross_mask)
        att = T.matmul(att, params[pre + ".cross.Wo"])
        x = T.layer_norm(T.add(x, att), params[pre + ".ln2.gain"], params[pre + ".ln2.bias"])

    logits = T.reshape(_pointer(x, state.memory.ptr_k, params, cfg), (b, state.n))
    probs = T.softmax_masked(logits, state.visited)
    return StepDistribution(probs, logits.data, tuple(new_k), tuple(new_v))


def advance(state: DecodeState, chosen, step: StepDistribution) -> DecodeState:
    """Append one city per batch row, extending the self-attention cache."""
    chosen = np.asarray(chosen, dtype=np.int64).reshape(-1)
    if chosen.shape[0] != state.batch:
        raise ValueError(f"expected {state.batch} choices, got {chosen.shape[0]}")
    rows = np.arange(state.batch)
    if np.any(chosen < 0) or np.any(chosen >= state.n):
        raise DecodeError(f"city index out of range for n={state.n}: {chosen.tolist()}")
    if np.any(state.visited[rows, chosen]):
        bad = int(np.flatnonzero(state.visited[rows, chosen])[0])
        raise DecodeError(f"city {int(chosen[bad])} already visited in batch row {bad}")
    visited = state.visited.copy()
    visited[rows, chosen] = True
    partial = np.concatenate([state.partial, chosen[:, None]], axis=1)
    if state.t:
        self_k = tuple(T.concat([old, new], axis=1) for old, new in zip(state.self_k, step.new_k))
        self_v = tuple(T.concat([old, new], axis=1) for old, new in zip(state.self_v, step.new_v))
    else:
        self_k, self_v = step.new_k, step.new_v
    return DecodeState(state.t + 1, visited, partial, self_k, self_v, state.memory)


def prefix_distributions(enc: Tensor, params: dict, cfg, partial) -> Tensor:
    """Step distributions for every prefix of ``partial``, recomputed without caching.

    Runs causal self-attention over all tokens of the prefix at once. Returns
    (batch, t + 1, n): entry s is the distribution after the first s choices.
    Used as an independent check of the incremental path and to score given
    tours.
    """
    partial = np.asarray(partial, dtype=np.int64)
    b, rows, d = enc.shape
    n = rows - 1
    t = partial.shape[1]
    if t > n:
        raise DecodeError(f"prefix of {t} cities is longer than the tour (n={n})")
    length = min(t + 1, n)
    token_rows = np.concatenate([np.zeros((b, 1), dtype=np.int64), partial[:, : length - 1] + 1], axis=1)
    pe = np.stack([positional_encoding(s, d, enc.dtype) for s in range(length)])
    x = T.add(T.concat([T.gather_rows(enc, token_rows[:, s])[:, None, :] for s in range(length)], axis=1), pe)

    causal = np.triu(np.ones((length, length), dtype=bool), k=1)[None, None]
    visited = np.zeros((b, length, n), dtype=bool)
    for s in range(1, length):
        visited[:, s] = visited[:, s - 1]
        visited[np.arange(b), s, partial[:, s - 1]] = True
    cities = enc[:, 1:, :]
    for layer in range(cfg.dec_layers):
        pre = f"dec.{layer}"
        att = multi_head(x, x, params, pre + ".self", cfg.heads, causal)
        x = T.layer_norm(T.add(x, att), params[pre + ".ln1.gain"], params[pre + ".ln1.bias"])
        att = multi_head(x, cities, params, pre + ".cross", cfg.heads, visited[:, None])
        x = T.layer_norm(T.add(x, att), params[pre + ".ln2.gain"], params[pre + ".ln2.bias"])
    logits = _pointer(x, T.matmul(cities, params["dec.ptr.Wk"]), params, cfg)
    return T.softmax_masked(logits, visited)


def sequence_log_prob(enc: Tensor, params: dict, cfg, tours) -> Tensor:
    """Sum over steps of log p(chosen city) for complete tours, shape (batch,)."""
    tours = np.asarray(tours, dtype=np.int64)
    b, n = tours.shape
    probs = prefix_distributions(enc, params, cfg, tours)  # (B, n, n)
    picked = probs[np.arange(b)[:, None], np.arange(n)[None, :], tours]
    return T.sum(T.log(picked), axis=1)


def rollout_reference(enc: Tensor, params: dict, cfg, partial) -> Optional[Tensor]:
    """Distribution at step len(partial), from the uncached path (None if complete)."""
    partial = np.asarray(partial, dtype=np.int64)
    if partial.shape[1] >= enc.shape[1] - 1:
        return None
    return prefix_distributions(enc, params, cfg, partial)[:, -1, :]
