"""Projection-wrapped attention blocks shared across modules."""
from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Param, Tensor, concat, linear, mha


def _proj(name: str, rng: Rng, d_in: int, d_out: int, std: float | None = None) -> Param:
    std = std if std is not None else 1.0 / np.sqrt(d_in)
    return Param(name, rng.spawn(name).normal((d_in, d_out), std=std))


class CrossAttention:
    """Multi-head cross attention: query from f1, key/value from f2.

    Softmax(Q1 K2^T / sqrt(d_k)) V2 per head, heads concatenated and
    passed through an output projection.
    """

    def __init__(self, name: str, rng: Rng, d_q_in: int, d_kv_in: int,
                 d_attn: int, d_out: int, heads: int):
        self.heads = heads
        self.w_q = _proj(f"{name}.w_q", rng, d_q_in, d_attn)
        self.w_k = _proj(f"{name}.w_k", rng, d_kv_in, d_attn)
        self.w_v = _proj(f"{name}.w_v", rng, d_kv_in, d_attn)
        self.w_o = _proj(f"{name}.w_o", rng, d_attn, d_out)

    def params(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    def __call__(self, f1: Tensor, f2: Tensor, mask=None,
                 weights_out: dict | None = None) -> Tensor:
        q = linear(f1, self.w_q.tensor)
        k = linear(f2, self.w_k.tensor)
        v = linear(f2, self.w_v.tensor)
        out = mha(q, k, v, self.heads, mask=mask, weights_out=weights_out)
        return linear(out, self.w_o.tensor)


class SelfAttention(CrossAttention):
    """Multi-head self attention (query, key, value all from one input)."""

    def __init__(self, name: str, rng: Rng, d_in: int, d_attn: int, heads: int):
        super().__init__(name, rng, d_in, d_in, d_attn, d_in, heads)

    def __call__(self, x: Tensor, mask=None, weights_out=None) -> Tensor:
        return super().__call__(x, x, mask=mask, weights_out=weights_out)


class AttentionPool:
    """CLIP-style attention pooling over a token sequence.

    The mean token is prepended, learned positional embeddings added,
    and a single query (the mean position) attends over all positions.
    """

    def __init__(self, name: str, rng: Rng, n_tokens: int, d_in: int,
                 d_out: int, heads: int):
        self.heads = heads
        self.pos = Param(f"{name}.pos",
                         rng.spawn(f"{name}.pos").normal((n_tokens + 1, d_in),
                                                         std=1.0 / np.sqrt(d_in)))
        self.w_q = _proj(f"{name}.w_q", rng, d_in, d_in)
        self.w_k = _proj(f"{name}.w_k", rng, d_in, d_in)
        self.w_v = _proj(f"{name}.w_v", rng, d_in, d_in)
        self.w_o = _proj(f"{name}.w_o", rng, d_in, d_out)

    def params(self):
        return [self.pos, self.w_q, self.w_k, self.w_v, self.w_o]

    def __call__(self, x: Tensor) -> Tensor:
        mean = x.mean(axis=0, keepdims=True)
        tokens = concat([mean, x], axis=0) + self.pos.tensor
        q = linear(tokens[0:1], self.w_q.tensor)
        k = linear(tokens, self.w_k.tensor)
        v = linear(tokens, self.w_v.tensor)
        out = mha(q, k, v, self.heads)
        return linear(out, self.w_o.tensor).reshape(-1)
