"""Graph transformer decoder with structure-biased self-attention.

Each layer runs biased self-attention among keypoint tokens,
coordinate-conditioned cross-attention into the query patches, a graph
feed-forward over the refined adjacency, and an iterative coordinate
update performed in inverse-sigmoid space so predictions stay in (0, 1).

The self-attention bias comes in three modes:
  markov    - a small MLP maps the vector of k-hop transition
              probabilities between two nodes to one bias per head;
  spd_table - a learnable scalar per head indexed by shortest-path hop
              distance (the discrete special case, binary graphs);
  none      - plain attention; with an identity adjacency the graph
              machinery disengages entirely.

The bias MLP is shared across decoder layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graphcore as gc
from . import numerics as nm
from .blocks import (AttentionParams, GcnFfnParams, NormParams,
                     cross_attention_block, gcn_ffn, init_attention,
                     init_gcn_ffn, init_norm, layer_norm,
                     self_attention_block)
from .encoder import coord_positional_encoding
from .numerics import Tensor

BIAS_MODES = ("none", "markov", "spd")


@dataclass
class BiasParams:
    # no output bias: a constant shift of all logits cancels in the row
    # softmax, so it would be a structurally dead parameter
    w1: Tensor        # (hops, hidden)
    b1: Tensor
    w2: Tensor        # (hidden, heads), zero-initialized
    spd_table: Tensor  # (heads, table_size), zero-initialized

    @property
    def hops(self) -> int:
        return self.w1.shape[0]

    @property
    def table_size(self) -> int:
        return self.spd_table.shape[1]


@dataclass
class RefineHeadParams:
    norm: NormParams
    w1: Tensor
    b1: Tensor
    w2: Tensor  # (C, 2), zero-initialized: the first update is the identity
    b2: Tensor


@dataclass
class DecoderLayerParams:
    norm_self: NormParams
    self_attn: AttentionParams
    norm_cross: NormParams
    cross_attn: AttentionParams
    gcn: GcnFfnParams
    refine: RefineHeadParams


@dataclass
class DecoderParams:
    layers: list


@dataclass
class CoordTrack:
    """Per-layer coordinate predictions, index 0 being the proposals."""

    preds: list

    @property
    def final(self) -> Tensor:
        return self.preds[-1]


def init_bias(rng, hops: int, heads: int, hidden: int, table_size: int) -> BiasParams:
    # zero output layer: a fresh bias term leaves attention untouched
    return BiasParams(
        w1=nm.param(rng, (hops, hidden), 1.0 / np.sqrt(hops)),
        b1=nm.zeros_param((hidden,)),
        w2=nm.zeros_param((hidden, heads)),
        spd_table=nm.zeros_param((heads, table_size)),
    )


def init_refine_head(rng, c: int) -> RefineHeadParams:
    return RefineHeadParams(
        norm=init_norm(c),
        w1=nm.param(rng, (c, c), 1.0 / np.sqrt(c)),
        b1=nm.zeros_param((c,)),
        w2=nm.zeros_param((c, 2)),
        b2=nm.zeros_param((2,)),
    )


def init_decoder(rng, c: int, heads: int, layers: int) -> DecoderParams:
    return DecoderParams(layers=[
        DecoderLayerParams(
            norm_self=init_norm(c), self_attn=init_attention(rng, c, heads),
            norm_cross=init_norm(c), cross_attn=init_attention(rng, c, heads),
            gcn=init_gcn_ffn(rng, c), refine=init_refine_head(rng, c),
        ) for _ in range(layers)])


def markov_bias(stack, params: BiasParams, heads: int):
    """Per-head K x K bias from the hop-probability stack via the MLP."""
    k = stack[0].shape[0]
    feats = nm.concat_cols([nm.reshape(s, (k * k, 1)) for s in stack])
    hidden = nm.gelu(nm.add(nm.matmul(feats, params.w1), params.b1))
    out = nm.matmul(hidden, params.w2)  # (K*K, heads)
    return [nm.reshape(nm.slice_cols(out, h, h + 1), (k, k)) for h in range(heads)]


def spd_bias(spd: np.ndarray, params: BiasParams, heads: int):
    """Table lookup by hop distance, clamped at the disconnected sentinel."""
    k = spd.shape[0]
    idx = np.minimum(spd, min(k + 1, params.table_size - 1))
    return [nm.take(nm.reshape(params.spd_table, (-1,)),
                    h * params.table_size + idx) for h in range(heads)]


def attention_bias(mode: str, params: BiasParams, heads: int,
                   markov_stack=None, spd: np.ndarray | None = None):
    if mode == "none":
        return None
    if mode == "markov":
        if markov_stack is None:
            raise ValueError("markov bias mode needs the hop-probability stack")
        return markov_bias(markov_stack, params, heads)
    if mode == "spd":
        if spd is None:
            raise ValueError("spd bias mode needs a hop-distance matrix")
        return spd_bias(spd, params, heads)
    raise ValueError(f"unknown bias mode {mode!r}; expected one of {BIAS_MODES}")


def biased_self_attention(f_k: Tensor, bias, norm: NormParams,
                          attn: AttentionParams) -> Tensor:
    return self_attention_block(f_k, norm, attn, bias=bias)


def refine_coords(p_l: Tensor, f_k: Tensor, head: RefineHeadParams) -> Tensor:
    """p_{l+1} = sigmoid(clamped_logit(p_l) + MLP(f_k)).

    The output is re-clamped away from {0, 1}: a saturated sigmoid rounds
    to exactly 0.0/1.0 in float64, and coordinates must stay strictly
    interior so the next inverse is finite.
    """
    h = layer_norm(f_k, head.norm)
    h = nm.gelu(nm.add(nm.matmul(h, head.w1), head.b1))
    delta = nm.add(nm.matmul(h, head.w2), head.b2)
    return nm.clamp_unit(nm.sigmoid(nm.add(nm.logit_eps(p_l), delta)))


def cross_attention(f_k: Tensor, f_q: Tensor, p_l: Tensor, norm: NormParams,
                    attn: AttentionParams, coord_conditioning: bool = True) -> Tensor:
    """Keypoint tokens query the patch stream; current coordinate estimates
    are folded into the queries as a sinusoidal encoding."""
    extra = coord_positional_encoding(p_l, f_k.shape[1]) if coord_conditioning else None
    return cross_attention_block(f_k, f_q, norm, attn, query_extra=extra)


def decode(f_k: Tensor, f_q: Tensor, a_tilde: Tensor, p0: Tensor,
           params: DecoderParams, bias_params: BiasParams, *,
           bias_mode: str = "none", hops: int = 4,
           spd: np.ndarray | None = None,
           coord_conditioning: bool = True) -> CoordTrack:
    """Run all decoder layers; returns every per-layer prediction."""
    bias = None
    if bias_mode == "markov":
        stack = gc.markov_stack_t(a_tilde, hops)
        bias = attention_bias("markov", bias_params, params.layers[0].self_attn.heads,
                              markov_stack=stack)
    elif bias_mode == "spd":
        bias = attention_bias("spd", bias_params, params.layers[0].self_attn.heads,
                              spd=spd)
    elif bias_mode != "none":
        raise ValueError(f"unknown bias mode {bias_mode!r}")

    preds = [p0]
    p = p0
    for layer in params.layers:
        f_k = biased_self_attention(f_k, bias, layer.norm_self, layer.self_attn)
        f_k = cross_attention(f_k, f_q, p, layer.norm_cross, layer.cross_attn,
                              coord_conditioning)
        f_k = gcn_ffn(f_k, a_tilde, layer.gcn)
        p = refine_coords(p, f_k, layer.refine)
        preds.append(p)
    return CoordTrack(preds=preds)
