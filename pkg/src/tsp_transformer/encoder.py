"""Transformer encoder over the cities plus a learned start token.

Each layer is ``H <- BN(H + MHA(H))`` then ``H <- BN(H + FFN(H))``. Batch
normalization pools statistics over the batch and node axes together, so the
encoder stays equivariant to reordering the cities. There is no positional
encoding: the input order carries no meaning.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import multi_head
from .tensor import RunningStats, Tensor


def init_encoder_params(cfg, rng: np.random.Generator, dtype) -> dict:
    d, d_ff = cfg.d, cfg.d_ff

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    p = {
        "enc.embed.W": uniform((2, d), 2),
        "enc.embed.b": uniform((d,), 2),
        "enc.start": Tensor(rng.standard_normal(2).astype(dtype), requires_grad=True),
    }
    for layer in range(cfg.enc_layers):
        pre = f"enc.{layer}"
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[f"{pre}.attn.{name}"] = uniform((d, d), d)
        p[f"{pre}.ff.W1"] = uniform((d, d_ff), d)
        p[f"{pre}.ff.b1"] = uniform((d_ff,), d)
        p[f"{pre}.ff.W2"] = uniform((d_ff, d), d_ff)
        p[f"{pre}.ff.b2"] = uniform((d,), d_ff)
        for bn in ("bn1", "bn2"):
            p[f"{pre}.{bn}.gain"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            p[f"{pre}.{bn}.bias"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    return p


def init_encoder_stats(cfg, dtype) -> dict:
    return {
        f"enc.{layer}.{bn}": RunningStats(cfg.d, dtype)
        for layer in range(cfg.enc_layers)
        for bn in ("bn1", "bn2")
    }


def encode(coords, params: dict, stats: dict, cfg, training: bool) -> Tensor:
    """Encode a (batch, n, 2) coordinate array into (batch, n + 1, d).

    Row 0 of every output is the start token; rows 1..n follow the input city
    order.
    """
    coords = np.asarray(coords)
    if coords.ndim != 3 or coords.shape[2] != 2:
        raise ValueError(f"coords must have shape (batch, n, 2), got {coords.shape}")
    dtype = params["enc.embed.W"].dtype
    b = coords.shape[0]
    start = T.add(Tensor(np.zeros((b, 1, 2), dtype=dtype)), params["enc.start"])
    h = T.concat([start, Tensor(coords.astype(dtype))], axis=1)
    h = T.add(T.matmul(h, params["enc.embed.W"]), params["enc.embed.b"])
    for layer in range(cfg.enc_layers):
        pre = f"enc.{layer}"
        h = T.add(h, multi_head(h, h, params, pre + ".attn", cfg.heads))
        h = T.batch_norm(h, params[pre + ".bn1.gain"], params[pre + ".bn1.bias"], stats[pre + ".bn1"], training)
        ff = T.relu(T.add(T.matmul(h, params[pre + ".ff.W1"]), params[pre + ".ff.b1"]))
        ff = T.add(T.matmul(ff, params[pre + ".ff.W2"]), params[pre + ".ff.b2"])
        h = T.batch_norm(T.add(h, ff), params[pre + ".bn2.gain"], params[pre + ".bn2.bias"], stats[pre + ".bn2"], training)
    return h
