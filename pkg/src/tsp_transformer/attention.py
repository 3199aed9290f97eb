"""Multi-head scaled dot-product attention on top of the tape ops."""
from __future__ import annotations

import math

from . import tensor as T
from .tensor import Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    # (B, L, d) -> (B, heads, L, d / heads)
    b, length, d = x.shape
    return T.transpose(T.reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, heads, length, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, length, heads * dk))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """Attention of projected queries (B, Lq, d) over keys/values (B, Lk, d).

    ``mask`` broadcasts to (B, heads, Lq, Lk); True entries are excluded.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    dk = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    weights = T.softmax_masked(scores, mask)
    return merge_heads(T.matmul(weights, vh))


def multi_head(x_q: Tensor, x_kv: Tensor, params: dict, prefix: str, heads: int, mask=None) -> Tensor:
    """Project, attend and apply the output projection."""
    q = T.matmul(x_q, params[prefix + ".Wq"])
    k = T.matmul(x_kv, params[prefix + ".Wk"])
    v = T.matmul(x_kv, params[prefix + ".Wv"])
    return T.matmul(attend(q, k, v, heads, mask), params[prefix + ".Wo"])
