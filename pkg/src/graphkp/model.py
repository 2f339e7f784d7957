"""Full model assembly: parameter groups and the episode forward pass.

Parameters are partitioned into named groups (featurizer, encoder,
proposal, skeleton_predictor, decoder, bias_mlp, mask_token) so training
phases can freeze and route them independently. All weights are
keypoint-count agnostic; one model serves categories of any size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec
from . import encoder as enc
from . import featurizer as fz
from . import graphcore as gc
from . import numerics as nm
from . import skeleton as sk
from .numerics import ParamGroup, Tensor

GROUP_NAMES = ("featurizer", "encoder", "proposal", "skeleton_predictor",
               "decoder", "bias_mlp", "mask_token")


@dataclass
class ModelConfig:
    c_raw: int = 16
    c: int = 32
    heads: int = 4
    enc_layers: int = 3
    sp_layers: int = 3
    dec_layers: int = 3
    delta_heads: int = 4
    ffn_mult: int = 4
    hops: int = 4
    bias_hidden: int = 16
    spd_table_size: int = 16
    sigma_pool: float = 1.0
    row_norm_eps: float = 1e-8

    def to_dict(self) -> dict:
        return {k: v for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class FeaturizerParams:
    proj_w: Tensor
    proj_b: Tensor


class Model:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = cfg.c
        self.featurizer = FeaturizerParams(
            proj_w=nm.param(rng, (cfg.c_raw, c), 1.0 / np.sqrt(cfg.c_raw)),
            proj_b=nm.zeros_param((c,)))
        self.encoder = enc.init_encoder(rng, c, cfg.heads, cfg.enc_layers, cfg.ffn_mult)
        self.proposal = enc.init_proposal(rng, c)
        self.skeleton = sk.init_skeleton(rng, c, cfg.heads, cfg.sp_layers, cfg.delta_heads)
        self.decoder = dec.init_decoder(rng, c, cfg.heads, cfg.dec_layers)
        self.bias = dec.init_bias(rng, cfg.hops, cfg.heads, cfg.bias_hidden,
                                  cfg.spd_table_size)
        self.mask_token = nm.param(rng, (c,), 1.0 / np.sqrt(c))
        self.groups = {
            "featurizer": ParamGroup("featurizer", dict(nm.named_tensors(self.featurizer))),
            "encoder": ParamGroup("encoder", dict(nm.named_tensors(self.encoder))),
            "proposal": ParamGroup("proposal", dict(nm.named_tensors(self.proposal))),
            "skeleton_predictor": ParamGroup("skeleton_predictor",
                                             dict(nm.named_tensors(self.skeleton))),
            "decoder": ParamGroup("decoder", dict(nm.named_tensors(self.decoder))),
            "bias_mlp": ParamGroup("bias_mlp", dict(nm.named_tensors(self.bias))),
            "mask_token": ParamGroup("mask_token", {"token": self.mask_token}),
        }

    def all_tensors(self):
        for group in self.groups.values():
            yield from group.tensors.values()

    def zero_grads(self):
        for t in self.all_tensors():
            t.zero_grad()

    def set_frozen(self, frozen_names) -> None:
        for name, group in self.groups.items():
            group.frozen = name in frozen_names


@dataclass
class EpisodeTokens:
    """Projected model inputs for one episode."""

    k: int
    h: int
    w: int
    kp: Tensor           # (K, C) pooled + projected support keypoint tokens
    query: Tensor        # (hw, C) query patch tokens with positional encoding
    support_img: Tensor  # (hw, C) support patch tokens with positional encoding


def _project(model: Model, raw: np.ndarray, posenc: np.ndarray | None = None) -> Tensor:
    x = nm.add(nm.matmul(nm.constant(raw), model.featurizer.proj_w),
               model.featurizer.proj_b)
    if posenc is not None:
        x = nm.add(x, nm.constant(posenc))
    return x


def episode_tokens(model: Model, ep: fz.Episode,
                   mask_query_fraction: float = 0.0) -> EpisodeTokens:
    """Pool, aggregate, and project episode data into model tokens.

    Query-patch masking (used by the occlusion ablation) zeroes a
    deterministic per-episode random subset of raw patch features before
    projection.
    """
    q_map, _ = ep.query
    if q_map.c_raw != model.cfg.c_raw:
        raise nm.ShapeError(
            f"episode has {q_map.c_raw} raw channels, model expects {model.cfg.c_raw}")
    pooled = [fz.pool_support_keypoint_features(fm, inst, model.cfg.sigma_pool)
              for fm, inst in ep.supports]
    vis = [inst.visibility for _, inst in ep.supports]
    kp_raw = fz.aggregate_shots(pooled, vis)

    support_raw = np.mean([fm.flat() for fm, _ in ep.supports], axis=0)
    query_raw = q_map.flat()
    if mask_query_fraction > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([ep.seed, 0x9A5C]))
        n = int(mask_query_fraction * query_raw.shape[0])
        masked = rng.choice(query_raw.shape[0], size=n, replace=False)
        query_raw = query_raw.copy()
        query_raw[masked] = 0.0

    posenc = enc.patch_positional_encoding(q_map.h, q_map.w, model.cfg.c)
    return EpisodeTokens(
        k=ep.k, h=q_map.h, w=q_map.w,
        kp=_project(model, kp_raw),
        query=_project(model, query_raw, posenc),
        support_img=_project(model, support_raw, posenc),
    )


@dataclass
class ForwardResult:
    tokens: EpisodeTokens
    f_k: Tensor
    f_q: Tensor
    prior_tilde: np.ndarray
    refined: sk.RefinedGraph | None
    a_tilde: Tensor
    spd: np.ndarray | None
    simmap: Tensor
    p0: Tensor
    track: dec.CoordTrack
    bias_mode: str


def phase_modes(phase: int) -> dict:
    """Which components are engaged for inference at a given training phase."""
    return {"use_sp": phase >= 2, "bias_mode": "markov" if phase >= 3 else "none"}


def decode_from(model: Model, f_k: Tensor, f_q: Tensor, a_tilde: Tensor,
                h: int, w: int, *, bias_mode: str, spd: np.ndarray | None,
                proposal_params=None, decoder_params=None, bias_params=None):
    """Proposal + decode stage, with optional parameter overrides (used to
    run the same stage under detached parameters for gradient routing)."""
    prop = proposal_params if proposal_params is not None else model.proposal
    decp = decoder_params if decoder_params is not None else model.decoder
    bias = bias_params if bias_params is not None else model.bias
    simmap = enc.similarity_map(f_k, f_q, prop)
    p0 = enc.proposals(simmap, h, w)
    track = dec.decode(f_k, f_q, a_tilde, p0, decp, bias,
                       bias_mode=bias_mode, hops=model.cfg.hops, spd=spd)
    return simmap, p0, track


def forward_episode(model: Model, ep: fz.Episode, *, use_sp: bool,
                    bias_mode: str = "none", use_prior_only: bool = False,
                    mask_query_fraction: float = 0.0) -> ForwardResult:
    """Standard forward pass over one episode."""
    tokens = episode_tokens(model, ep, mask_query_fraction)
    f_k, f_q = enc.encode(tokens.kp, tokens.query, model.encoder)

    prior_tilde = gc.row_normalize(gc.symmetrize(ep.prior), model.cfg.row_norm_eps).w
    refined = None
    if use_sp and not use_prior_only:
        refined = sk.refine_graph(ep.prior.w, tokens.support_img, f_k,
                                  model.skeleton, model.cfg.row_norm_eps)
        a_tilde = refined.a_tilde
    else:
        a_tilde = nm.constant(prior_tilde)

    spd = None
    if bias_mode == "spd":
        spd = gc.shortest_path_distances(gc.symmetrize(ep.prior))

    simmap, p0, track = decode_from(model, f_k, f_q, a_tilde, tokens.h, tokens.w,
                                    bias_mode=bias_mode, spd=spd)
    return ForwardResult(tokens=tokens, f_k=f_k, f_q=f_q, prior_tilde=prior_tilde,
                         refined=refined, a_tilde=a_tilde, spd=spd, simmap=simmap,
                         p0=p0, track=track, bias_mode=bias_mode)
