"""Residual edge-weight prediction over a prior skeleton.

Keypoint tokens are refined by dual-attention layers that exchange
information with the support image stream, a multi-head scoring head
turns them into a residual adjacency, and a zero-initialized scalar gate
blends that residual into the prior. The gated sum is rectified,
symmetrized, and row-normalized, so the output is always a valid
row-stochastic graph and is exactly the normalized prior at
initialization.

The residual uses pre-softmax attention scores: unlike post-softmax
weights they can go negative, which is what lets training delete prior
edges through the rectifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graphcore as gc
from . import numerics as nm
from .blocks import (AttentionParams, GcnFfnParams, NormParams,
                     cross_attention_block, gcn_ffn, init_attention,
                     init_gcn_ffn, init_norm, self_attention_block)
from .numerics import Tensor


@dataclass
class SkeletonLayerParams:
    norm_self: NormParams
    self_attn: AttentionParams
    norm_pull: NormParams      # keypoints query the image stream
    pull_attn: AttentionParams
    gcn: GcnFfnParams
    norm_push: NormParams      # image stream queries the keypoints
    push_attn: AttentionParams


@dataclass
class DeltaHeadParams:
    wq: list   # per-head (C, d)
    wk: list
    mix: Tensor  # (heads,)


@dataclass
class SkeletonParams:
    layers: list
    delta: DeltaHeadParams
    gate: Tensor  # scalar, zero at construction


@dataclass
class RefinedGraph:
    delta: Tensor    # raw residual, unbounded
    a_raw: Tensor    # relu(prior + gate * delta)
    a_sym: Tensor
    a_tilde: Tensor  # row-stochastic


def init_skeleton(rng, c: int, heads: int, layers: int,
                  delta_heads: int) -> SkeletonParams:
    d = c // delta_heads
    s = 1.0 / np.sqrt(c)
    return SkeletonParams(
        layers=[SkeletonLayerParams(
            norm_self=init_norm(c), self_attn=init_attention(rng, c, heads),
            norm_pull=init_norm(c), pull_attn=init_attention(rng, c, heads),
            gcn=init_gcn_ffn(rng, c),
            norm_push=init_norm(c), push_attn=init_attention(rng, c, heads),
        ) for _ in range(layers)],
        delta=DeltaHeadParams(
            wq=[nm.param(rng, (c, d), s) for _ in range(delta_heads)],
            wk=[nm.param(rng, (c, d), s) for _ in range(delta_heads)],
            mix=nm.Tensor(np.full(delta_heads, 1.0 / delta_heads), requires_grad=True),
        ),
        gate=nm.zeros_param(()),
    )


def refine_features(prior_tilde: Tensor, f_img: Tensor, f_k: Tensor,
                    params: SkeletonParams):
    """Dual-attention refinement; returns updated (keypoint, image) streams.

    Per layer: keypoint self-attention, keypoint<-image cross-attention,
    graph feed-forward over the normalized prior, then image<-keypoint
    cross-attention so structure flows back into the image stream.
    """
    for layer in params.layers:
        f_k = self_attention_block(f_k, layer.norm_self, layer.self_attn)
        f_k = cross_attention_block(f_k, f_img, layer.norm_pull, layer.pull_attn)
        f_k = gcn_ffn(f_k, prior_tilde, layer.gcn)
        f_img = cross_attention_block(f_img, f_k, layer.norm_push, layer.push_attn)
    return f_k, f_img


def predict_delta(f_k: Tensor, params: DeltaHeadParams) -> Tensor:
    """Residual adjacency from per-head pre-softmax attention scores."""
    d = params.wq[0].shape[1]
    inv_sqrt_d = 1.0 / np.sqrt(d)
    total = None
    for h in range(len(params.wq)):
        q = nm.matmul(f_k, params.wq[h])
        k = nm.matmul(f_k, params.wk[h])
        score = nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt_d)
        weighted = nm.mul(score, nm.take(params.mix, np.array([[h]])))
        total = weighted if total is None else nm.add(total, weighted)
    return total


def gate_combine(prior: Tensor, delta: Tensor, gate: Tensor) -> Tensor:
    """relu(prior + gate * delta); the gate starts at zero so the output
    starts as the prior exactly."""
    return nm.relu(nm.add(prior, nm.mul(gate, delta)))


def refine_graph(prior_w: np.ndarray, f_img: Tensor, f_k: Tensor,
                 params: SkeletonParams, eps: float = gc.ROW_EPS) -> RefinedGraph:
    """Full pipeline: refine features, score residual, gate, normalize."""
    if prior_w.shape[0] != f_k.shape[0]:
        raise nm.ShapeError(
            f"prior is {prior_w.shape} but there are {f_k.shape[0]} keypoint tokens")
    prior_tilde = gc.row_normalize(gc.symmetrize(gc.Adjacency(prior_w)), eps)
    f_k_ref, _ = refine_features(nm.constant(prior_tilde.w), f_img, f_k, params)
    delta = predict_delta(f_k_ref, params.delta)
    a_raw = gate_combine(nm.constant(prior_w), delta, params.gate)
    a_sym = gc.symmetrize_t(a_raw)
    a_tilde = gc.row_normalize_t(a_sym, eps)
    return RefinedGraph(delta=delta, a_raw=a_raw, a_sym=a_sym, a_tilde=a_tilde)
