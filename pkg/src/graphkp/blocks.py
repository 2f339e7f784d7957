"""Shared transformer building blocks on engine tensors.

All blocks are pre-norm residual. Multi-head attention keeps one
projection matrix per head so the engine only ever needs 2-D matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    wq: list   # per-head (C, d)
    wk: list
    wv: list
    wo: Tensor  # (C, C)

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class GcnFfnParams:
    norm: NormParams
    w_gcn: Tensor
    b_gcn: Tensor
    w_node: Tensor
    b_node: Tensor


def init_norm(c: int) -> NormParams:
    return NormParams(gain=nm.ones_param((c,)), bias=nm.zeros_param((c,)))


def init_attention(rng, c: int, heads: int) -> AttentionParams:
    if c % heads != 0:
        raise ValueError(f"heads={heads} must divide width c={c}")
    d = c // heads
    s = 1.0 / np.sqrt(c)
    return AttentionParams(
        wq=[nm.param(rng, (c, d), s) for _ in range(heads)],
        wk=[nm.param(rng, (c, d), s) for _ in range(heads)],
        wv=[nm.param(rng, (c, d), s) for _ in range(heads)],
        wo=nm.param(rng, (c, c), s),
    )


def init_ffn(rng, c: int, mult: int) -> FeedForwardParams:
    hidden = c * mult
    return FeedForwardParams(
        w1=nm.param(rng, (c, hidden), 1.0 / np.sqrt(c)),
        b1=nm.zeros_param((hidden,)),
        w2=nm.param(rng, (hidden, c), 1.0 / np.sqrt(hidden)),
        b2=nm.zeros_param((c,)),
    )


def init_gcn_ffn(rng, c: int) -> GcnFfnParams:
    s = 1.0 / np.sqrt(c)
    return GcnFfnParams(
        norm=init_norm(c),
        w_gcn=nm.param(rng, (c, c), s),
        b_gcn=nm.zeros_param((c,)),
        w_node=nm.param(rng, (c, c), s),
        b_node=nm.zeros_param((c,)),
    )


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    return nm.layer_norm_rows(x, p.gain, p.bias)


def attend(queries: Tensor, keys_values: Tensor, p: AttentionParams,
           bias=None) -> Tensor:
    """Multi-head scaled dot-product attention (projection only, no residual).

    ``bias`` is an optional per-head list of (Tq, Tk) tensors added to the
    attention logits before the row softmax.
    """
    inv_sqrt_d = 1.0 / np.sqrt(p.head_dim)
    outs = []
    for h in range(p.heads):
        q = nm.matmul(queries, p.wq[h])
        k = nm.matmul(keys_values, p.wk[h])
        v = nm.matmul(keys_values, p.wv[h])
        logits = nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt_d)
        if bias is not None:
            logits = nm.add(logits, bias[h])
        outs.append(nm.matmul(nm.softmax_rows(logits), v))
    return nm.matmul(nm.concat_cols(outs), p.wo)


def self_attention_block(x: Tensor, norm: NormParams, attn: AttentionParams,
                         bias=None) -> Tensor:
    h = layer_norm(x, norm)
    return nm.add(x, attend(h, h, attn, bias=bias))


def cross_attention_block(x: Tensor, context: Tensor, norm: NormParams,
                          attn: AttentionParams, query_extra: Tensor | None = None) -> Tensor:
    """x queries the context stream; ``query_extra`` is added to the
    normalized queries (used for coordinate conditioning)."""
    q = layer_norm(x, norm)
    if query_extra is not None:
        q = nm.add(q, query_extra)
    return nm.add(x, attend(q, context, attn))


def ffn_block(x: Tensor, norm: NormParams, p: FeedForwardParams) -> Tensor:
    h = layer_norm(x, norm)
    h = nm.gelu(nm.add(nm.matmul(h, p.w1), p.b1))
    return nm.add(x, nm.add(nm.matmul(h, p.w2), p.b2))


def gcn_ffn(x: Tensor, a_tilde: Tensor, p: GcnFfnParams) -> Tensor:
    """Graph feed-forward: mix tokens through the stochastic adjacency,
    activate, then apply a token-shared linear. Residual around the block.

    The trailing per-token linear counters the over-smoothing that pure
    graph mixing causes; a keypoint-indexed weight bank would break
    permutation equivariance, so the transform is shared across tokens.
    """
    h = layer_norm(x, p.norm)
    mixed = nm.add(nm.matmul(nm.matmul(a_tilde, h), p.w_gcn), p.b_gcn)
    out = nm.add(nm.matmul(nm.gelu(mixed), p.w_node), p.b_node)
    return nm.add(x, out)
