"""Losses, masked-feature supervision with gradient routing, the
three-phase schedule, and evaluation metrics.

Phase 1 trains the base localization model against the normalized prior
graph. Phase 2 freezes the featurizer and brings in the graph predictor,
adding the masked-keypoint loss whose gradients are routed exclusively
into the predictor. Phase 3 additionally freezes the predictor and
activates the hop-probability attention bias.

The routed loss is built by recomputing the post-encoder stages with
every non-predictor parameter and every feature input detached, so a
single backward pass over (offset + lambda * adjacency) deposits
adjacency gradients only in the skeleton_predictor group.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import featurizer as fz
from . import graphcore as gc
from . import numerics as nm
from . import skeleton as sk
from .model import (GROUP_NAMES, Model, ModelConfig, ForwardResult,
                    decode_from, forward_episode, phase_modes)
from .numerics import Tensor

CHECKPOINT_VERSION = 1

PHASE_SETUP = {
    1: {"frozen": (), "use_sp": False, "bias_mode": "none", "use_adj": False},
    2: {"frozen": ("featurizer",), "use_sp": True, "bias_mode": "none",
        "use_adj": True},
    3: {"frozen": ("featurizer", "skeleton_predictor"), "use_sp": True,
        "bias_mode": "markov", "use_adj": True},
}


class PhaseOrderError(RuntimeError):
    pass


@dataclass
class MaskSpec:
    keep: np.ndarray    # (K,) 1.0 = keep, 0.0 = replaced by the mask token
    ratio: float

    @property
    def n_masked(self) -> int:
        return int((self.keep == 0.0).sum())


def make_mask(k: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Mask exactly round(ratio * K) keypoints, always keeping at least one."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n_mask = min(int(round(ratio * k)), k - 1)
    keep = np.ones(k)
    if n_mask > 0:
        keep[rng.choice(k, size=n_mask, replace=False)] = 0.0
    return MaskSpec(keep=keep, ratio=ratio)


def apply_mask(f_k: Tensor, mask: MaskSpec, token: Tensor) -> Tensor:
    """keep * F + (1 - keep) * token, broadcast per row."""
    if mask.n_masked == 0:
        return f_k  # bit-exact passthrough
    keep = mask.keep[:, None]
    kept = nm.mul(f_k, nm.constant(keep))
    filled = nm.mul(nm.reshape(token, (1, token.shape[0])), nm.constant(1.0 - keep))
    return nm.add(kept, filled)


@dataclass
class TrainConfig:
    lambda_adj: float = 1.0
    mask_ratio: float = 0.5
    hops: int = 4
    phase_epochs: tuple = (30, 30, 30)
    episodes_per_epoch: int = 80
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_every_epochs: int = 5
    val_episodes: int = 16
    routing_check_every: int = 100

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["phase_epochs"] = list(self.phase_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "phase_epochs" in d:
            d["phase_epochs"] = tuple(d["phase_epochs"])
        return cls(**d)


@dataclass
class Metrics:
    pck: float
    auc: float
    nme: float


def visibility_weights(visibility: np.ndarray) -> np.ndarray:
    return np.repeat(visibility.astype(np.float64), 2).reshape(-1, 2)


def offset_loss(track, gt: np.ndarray, visibility: np.ndarray) -> Tensor:
    """Visibility-weighted L1, averaged over all refined layers (deep
    supervision; the proposal itself trains through the first update)."""
    w = visibility_weights(visibility)
    target = nm.constant(gt)
    refined = track.preds[1:]
    total = None
    for p in refined:
        term = nm.l1_loss(p, target, w)
        total = term if total is None else nm.add(total, term)
    return nm.scale(total, 1.0 / len(refined))


def masked_forward(model: Model, ep: fz.Episode, a_tilde: Tensor,
                   mask: MaskSpec, *, bias_mode: str = "none",
                   spd: np.ndarray | None = None,
                   fwd: ForwardResult | None = None) -> Tensor:
    """Rerun proposals and decoding on masked support keypoint features.

    ``a_tilde`` must come from the predictor on unmasked features. With a
    ratio-0 mask this reproduces the standard forward bit-exactly.
    """
    if fwd is None:
        fwd = forward_episode(model, ep, use_sp=False, bias_mode="none")
    masked = apply_mask(fwd.f_k, mask, model.mask_token)
    tokens = fwd.tokens
    _, _, track = decode_from(model, masked, fwd.f_q, a_tilde, tokens.h, tokens.w,
                              bias_mode=bias_mode, spd=spd)
    return track.final


def adjacency_loss(model: Model, ep: fz.Episode, rng: np.random.Generator, *,
                   mask_ratio: float = 0.5, bias_mode: str = "none",
                   fwd: ForwardResult | None = None,
                   mask: MaskSpec | None = None) -> Tensor:
    """Masked-keypoint localization loss, routed into the graph predictor.

    Every parameter group except skeleton_predictor, and every feature
    input, is detached; the only live path to the loss runs through the
    predicted adjacency.
    """
    if fwd is None:
        fwd = forward_episode(model, ep, use_sp=False, bias_mode="none")
    if mask is None:
        mask = make_mask(ep.k, mask_ratio, rng)

    f_k = fwd.f_k.detach()
    f_q = fwd.f_q.detach()
    s_img = fwd.tokens.support_img.detach()
    refined = sk.refine_graph(ep.prior.w, s_img, f_k, model.skeleton,
                              model.cfg.row_norm_eps)
    masked = apply_mask(f_k, mask, model.mask_token.detach())
    _, _, track = decode_from(
        model, masked, f_q, refined.a_tilde, fwd.tokens.h, fwd.tokens.w,
        bias_mode=bias_mode, spd=fwd.spd,
        proposal_params=nm.detach_params(model.proposal),
        decoder_params=nm.detach_params(model.decoder),
        bias_params=nm.detach_params(model.bias))
    _, q_inst = ep.query
    return nm.l1_loss(track.final, nm.constant(q_inst.coords),
                      visibility_weights(q_inst.visibility))


def total_loss(model: Model, ep: fz.Episode, cfg: TrainConfig,
               rng: np.random.Generator, phase: int):
    """Combined per-episode loss for a phase; returns (loss, float parts)."""
    setup = PHASE_SETUP[phase]
    fwd = forward_episode(model, ep, use_sp=setup["use_sp"],
                          bias_mode=setup["bias_mode"])
    _, q_inst = ep.query
    l_off = offset_loss(fwd.track, q_inst.coords, q_inst.visibility)
    parts = {"offset": float(l_off.values), "adj": 0.0}
    loss = l_off
    if setup["use_adj"] and cfg.lambda_adj > 0.0:
        l_adj = adjacency_loss(model, ep, rng, mask_ratio=cfg.mask_ratio,
                               bias_mode=setup["bias_mode"], fwd=fwd)
        parts["adj"] = float(l_adj.values)
        loss = nm.add(loss, nm.scale(l_adj, cfg.lambda_adj))
    return loss, parts


def routed_gradient_profile(model: Model, ep: fz.Episode, cfg: TrainConfig,
                            rng: np.random.Generator, phase: int) -> dict:
    """Max |grad| per group after backpropagating lambda * L_adj alone."""
    setup = PHASE_SETUP[phase]
    model.zero_grads()
    l_adj = adjacency_loss(model, ep, rng, mask_ratio=cfg.mask_ratio,
                           bias_mode=setup["bias_mode"])
    nm.backward(nm.scale(l_adj, cfg.lambda_adj))
    profile = {name: group.max_abs_grad() for name, group in model.groups.items()}
    model.zero_grads()
    return profile


class Adam:
    """Adam over the model's parameter groups; frozen groups are skipped."""

    def __init__(self, model: Model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.t = 0
        self.m = {}
        self.v = {}
        for gname, group in model.groups.items():
            for tname, tensor in group.tensors.items():
                key = f"{gname}/{tname}"
                self.m[key] = np.zeros_like(tensor.values)
                self.v[key] = np.zeros_like(tensor.values)

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for gname, group in self.model.groups.items():
            if group.frozen:
                continue
            for tname, tensor in group.tensors.items():
                g = tensor.grad
                if g is None:
                    continue
                key = f"{gname}/{tname}"
                m = self.m[key]
                v = self.v[key]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                tensor.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state_dict(self) -> dict:
        return {"t": self.t,
                "m": {k: _b64(v) for k, v in self.m.items()},
                "v": {k: _b64(v) for k, v in self.v.items()}}


def lr_at(base: float, step: int, total_steps: int) -> float:
    """Step decay: x0.1 at 80% and again at 90% of the phase."""
    progress = step / max(total_steps, 1)
    lr = base
    if progress >= 0.8:
        lr *= 0.1
    if progress >= 0.9:
        lr *= 0.1
    return lr


@dataclass
class TrainResult:
    model: Model
    phase_snapshots: dict = field(default_factory=dict)  # phase -> group values
    routing_checks: list = field(default_factory=list)
    history: list = field(default_factory=list)          # per-step loss rows
    checkpoint_paths: dict = field(default_factory=dict)
    last_optimizer: Adam | None = None


def snapshot_groups(model: Model) -> dict:
    return {gname: {tname: t.values.copy() for tname, t in group.tensors.items()}
            for gname, group in model.groups.items()}


def restore_groups(model: Model, snapshot: dict) -> None:
    for gname, tensors in snapshot.items():
        for tname, values in tensors.items():
            model.groups[gname].tensors[tname].values[...] = values


def clone_model(model: Model, snapshot: dict | None = None) -> Model:
    twin = Model(model.cfg, model.seed)
    restore_groups(twin, snapshot if snapshot is not None else snapshot_groups(model))
    return twin


def train_phase(model: Model, dataset: fz.Dataset, phase: int, cfg: TrainConfig,
                rng: np.random.Generator, result: TrainResult,
                log_fh=None) -> None:
    if phase not in PHASE_SETUP:
        raise PhaseOrderError(f"unknown phase {phase}")
    setup = PHASE_SETUP[phase]
    model.set_frozen(setup["frozen"])
    opt = Adam(model, cfg)

    train_paths = dataset.episode_paths("train")
    val_paths = dataset.episode_paths("val")
    steps_per_epoch = max(1, cfg.episodes_per_epoch // cfg.batch_size)
    total_steps = cfg.phase_epochs[phase - 1] * steps_per_epoch
    probe = dataset.load(train_paths[0])

    for step in range(total_steps):
        if (setup["use_adj"] and cfg.routing_check_every
                and step % cfg.routing_check_every == 0):
            profile = routed_gradient_profile(model, probe, cfg, rng, phase)
            result.routing_checks.append({"phase": phase, "step": step,
                                          "profile": profile})

        replace = len(train_paths) < cfg.batch_size
        picks = rng.choice(len(train_paths), size=cfg.batch_size, replace=replace)
        model.zero_grads()
        batch_loss = None
        parts_sum = {"offset": 0.0, "adj": 0.0}
        for i in picks:
            loss, parts = total_loss(model, dataset.load(train_paths[i]), cfg,
                                     rng, phase)
            batch_loss = loss if batch_loss is None else nm.add(batch_loss, loss)
            for k in parts_sum:
                parts_sum[k] += parts[k]
        nm.backward(nm.scale(batch_loss, 1.0 / cfg.batch_size))
        opt.step(lr_at(cfg.lr, step, total_steps))

        row = {"step": step, "phase": phase,
               "loss_offset": parts_sum["offset"] / cfg.batch_size,
               "loss_adj": parts_sum["adj"] / cfg.batch_size,
               "pck_val": ""}
        epoch_end = (step + 1) % steps_per_epoch == 0
        epoch_idx = (step + 1) // steps_per_epoch
        if (epoch_end and val_paths and cfg.val_every_epochs
                and epoch_idx % cfg.val_every_epochs == 0):
            episodes = [dataset.load(p) for p in val_paths[:cfg.val_episodes]]
            row["pck_val"] = f"{evaluate(model, episodes, use_sp=setup['use_sp'], bias_mode=setup['bias_mode']).pck:.6f}"
        result.history.append(row)
        if log_fh is not None:
            log_fh.write(f"{row['step']},{row['phase']},{row['loss_offset']:.8f},"
                         f"{row['loss_adj']:.8f},{row['pck_val']}\n")
            log_fh.flush()

    result.phase_snapshots[phase] = snapshot_groups(model)
    result.last_optimizer = opt


def train(model: Model, dataset: fz.Dataset, cfg: TrainConfig,
          phases=(1, 2, 3), out_dir: str | None = None,
          rng: np.random.Generator | None = None,
          log_path: str | None = None) -> TrainResult:
    """Run the requested phases in order; checkpoints at each phase end."""
    phases = tuple(phases)
    if list(phases) != sorted(phases) or len(set(phases)) != len(phases):
        raise PhaseOrderError(f"phases must be strictly increasing, got {phases}")
    result = TrainResult(model=model)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    log_fh = None
    if log_path is not None:
        fresh = not os.path.exists(log_path)
        log_fh = open(log_path, "a", encoding="ascii")
        if fresh:
            log_fh.write("step,phase,loss_offset,loss_adj,pck_val\n")
    try:
        for phase in phases:
            train_phase(model, dataset, phase, cfg, rng, result, log_fh)
            if out_dir is not None:
                path = os.path.join(out_dir, f"checkpoint_phase{phase}.json")
                save_checkpoint(model, path, phase=phase, train_cfg=cfg,
                                optimizer=result.last_optimizer, rng=rng)
                result.checkpoint_paths[phase] = path
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


# ---------------------------------------------------------------------------
# Evaluation


def bbox_side(coords: np.ndarray, visibility: np.ndarray) -> float:
    vis = coords[visibility.astype(bool)]
    side = max(float(vis[:, 0].max() - vis[:, 0].min()),
               float(vis[:, 1].max() - vis[:, 1].min()))
    return max(side, 1e-9)


AUC_THRESHOLDS = [i / 100.0 for i in range(101)]


def evaluate(model: Model, episodes, thr: float = 0.2, *, use_sp: bool,
             bias_mode: str, use_prior_only: bool = False,
             mask_query_fraction: float = 0.0, hard_proposals: bool = False,
             collect: list | None = None) -> Metrics:
    """PCK / AUC / NME over visible query keypoints.

    Distances are normalized by the longest side of the tight bounding box
    of the visible ground-truth keypoints.
    """
    normalized = []
    with nm.no_grad():
        for ep in episodes:
            fwd = forward_episode(model, ep, use_sp=use_sp, bias_mode=bias_mode,
                                  use_prior_only=use_prior_only,
                                  mask_query_fraction=mask_query_fraction)
            pred = fwd.track.final.values
            if hard_proposals:
                from . import decoder as dec_mod
                from .encoder import proposals_hard
                p0 = nm.constant(proposals_hard(fwd.simmap, fwd.tokens.h, fwd.tokens.w))
                pred = dec_mod.decode(fwd.f_k, fwd.f_q, fwd.a_tilde, p0,
                                      model.decoder, model.bias,
                                      bias_mode=bias_mode, hops=model.cfg.hops,
                                      spd=fwd.spd).final.values
            if collect is not None:
                collect.append(pred.copy())
            _, q_inst = ep.query
            side = bbox_side(q_inst.coords, q_inst.visibility)
            for kk in range(ep.k):
                if not q_inst.visibility[kk]:
                    continue
                dx = float(pred[kk, 0] - q_inst.coords[kk, 0])
                dy = float(pred[kk, 1] - q_inst.coords[kk, 1])
                normalized.append(np.sqrt(dx * dx + dy * dy) / side)
    if not normalized:
        return Metrics(pck=0.0, auc=0.0, nme=0.0)
    total = len(normalized)
    pck = sum(1 for d in normalized if d <= thr) / total
    auc = sum(sum(1 for d in normalized if d <= t) / total
              for t in AUC_THRESHOLDS) / len(AUC_THRESHOLDS)
    nme = sum(normalized) / total
    return Metrics(pck=pck, auc=auc, nme=nme)


# ---------------------------------------------------------------------------
# Checkpoints


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(payload: str, shape) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(payload.encode("ascii")), dtype="<f8")
    return arr.reshape(shape).astype(np.float64)


def checkpoint_dict(model: Model, phase: int, train_cfg: TrainConfig | None,
                    optimizer: Adam | None, rng: np.random.Generator | None) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "phase": phase,
        "seed": model.seed,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "groups": {
            gname: {
                "frozen": group.frozen,
                "tensors": {tname: {"shape": list(t.shape), "data": _b64(t.values)}
                            for tname, t in group.tensors.items()},
            } for gname, group in model.groups.items()
        },
        "optimizer": optimizer.state_dict() if optimizer else None,
        "rng_state": _encode_rng(rng) if rng is not None else None,
    }
    return doc


def save_checkpoint(model: Model, path: str, *, phase: int,
                    train_cfg: TrainConfig | None = None,
                    optimizer: Adam | None = None,
                    rng: np.random.Generator | None = None) -> None:
    doc = checkpoint_dict(model, phase, train_cfg, optimizer, rng)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str):
    """Returns (model, phase, train_cfg | None, rng | None)."""
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unknown checkpoint version {doc.get('version')!r}")
    model = Model(ModelConfig.from_dict(doc["model_config"]), seed=doc["seed"])
    for gname, gdoc in doc["groups"].items():
        group = model.groups.get(gname)
        if group is None:
            raise CheckpointError(f"checkpoint has unknown group {gname!r}")
        for tname, tdoc in gdoc["tensors"].items():
            tensor = group.tensors.get(tname)
            if tensor is None or list(tensor.shape) != tdoc["shape"]:
                raise CheckpointError(
                    f"checkpoint tensor {gname}/{tname} is incompatible")
            tensor.values[...] = _unb64(tdoc["data"], tdoc["shape"])
        group.frozen = bool(gdoc["frozen"])
    cfg = (TrainConfig.from_dict(doc["train_config"])
           if doc.get("train_config") else None)
    rng = _decode_rng(doc["rng_state"]) if doc.get("rng_state") else None
    return model, int(doc["phase"]), cfg, rng


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _decode_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng
