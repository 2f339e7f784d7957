"""Token fusion encoder and the similarity-aware proposal generator.

Support keypoint tokens and query patch tokens are concatenated, run
through pre-norm self-attention blocks, and split back. Keypoint tokens
carry no positional encoding (their identity is their content), while
patch tokens get a fixed 2-D sinusoidal encoding. Initial coordinates
come from a soft-argmax over trainable bilinear similarity maps, which
keeps the proposal pathway differentiable end to end.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .blocks import (AttentionParams, FeedForwardParams, NormParams,
                     ffn_block, init_attention, init_ffn, init_norm,
                     self_attention_block)
from .numerics import Tensor


@dataclass
class EncoderLayerParams:
    norm_attn: NormParams
    attn: AttentionParams
    norm_ffn: NormParams
    ffn: FeedForwardParams


@dataclass
class EncoderParams:
    layers: list


@dataclass
class ProposalParams:
    w_sim: Tensor
    tau: float


def init_encoder(rng, c: int, heads: int, layers: int, ffn_mult: int) -> EncoderParams:
    return EncoderParams(layers=[
        EncoderLayerParams(norm_attn=init_norm(c), attn=init_attention(rng, c, heads),
                           norm_ffn=init_norm(c), ffn=init_ffn(rng, c, ffn_mult))
        for _ in range(layers)])


def init_proposal(rng, c: int, tau: float | None = None) -> ProposalParams:
    return ProposalParams(w_sim=nm.param(rng, (c, c), 1.0 / np.sqrt(c)),
                          tau=float(tau if tau is not None else np.sqrt(c)))


def encode(f_k: Tensor, f_q: Tensor, params: EncoderParams):
    """Fuse keypoint and patch tokens; returns the refined (K x C, hw x C) pair."""
    if f_k.shape[1] != f_q.shape[1]:
        raise nm.ShapeError(f"token widths differ: {f_k.shape} vs {f_q.shape}")
    k = f_k.shape[0]
    x = nm.concat_rows([f_k, f_q])
    for layer in params.layers:
        x = self_attention_block(x, layer.norm_attn, layer.attn)
        x = ffn_block(x, layer.norm_ffn, layer.ffn)
    return nm.slice_rows(x, 0, k), nm.slice_rows(x, k, x.shape[0])


def similarity_map(f_k: Tensor, f_q: Tensor, params: ProposalParams) -> Tensor:
    """Row-stochastic K x hw similarity via a trainable bilinear form."""
    scores = nm.matmul(nm.matmul(f_k, params.w_sim), nm.transpose(f_q))
    return nm.softmax_rows(nm.scale(scores, 1.0 / params.tau))


@functools.lru_cache(maxsize=32)
def _centers(h: int, w: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cen = np.stack([(ii.ravel() + 0.5) / h, (jj.ravel() + 0.5) / w], axis=1)
    cen.setflags(write=False)
    return cen


def proposals(simmap: Tensor, h: int, w: int) -> Tensor:
    """Soft-argmax: expected patch-center coordinate per row distribution."""
    return nm.matmul(simmap, nm.constant(_centers(h, w)))


def proposals_hard(simmap: Tensor, h: int, w: int) -> np.ndarray:
    """Hard peak picking for inference-time comparison (not differentiable)."""
    idx = simmap.values.argmax(axis=1)
    return _centers(h, w)[idx].copy()


@functools.lru_cache(maxsize=32)
def _axis_freqs(c: int) -> np.ndarray:
    if c % 4 != 0:
        raise ValueError("positional encoding needs a width divisible by 4")
    nf = c // 4
    freqs = np.pi * (2.0 ** np.arange(nf))
    freqs.setflags(write=False)
    return freqs


@functools.lru_cache(maxsize=32)
def patch_positional_encoding(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding of patch centers, (hw, c)."""
    freqs = _axis_freqs(c)
    cen = _centers(h, w)
    parts = []
    for axis in range(2):
        phase = cen[:, axis:axis + 1] * freqs[None, :]
        parts.extend([np.sin(phase), np.cos(phase)])
    enc = np.concatenate(parts, axis=1)
    enc.setflags(write=False)
    return enc


def coord_positional_encoding(p: Tensor, c: int) -> Tensor:
    """Same sinusoidal encoding of a (K, 2) coordinate tensor, differentiable."""
    freqs = nm.constant(_axis_freqs(c)[None, :])
    parts = []
    for axis in range(2):
        phase = nm.matmul(nm.slice_cols(p, axis, axis + 1), freqs)
        parts.extend([nm.sin(phase), nm.cos(phase)])
    return nm.concat_cols(parts)
