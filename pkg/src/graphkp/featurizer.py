"""Synthetic skeleton categories and the episode file format.

A category is a template of 2-D keypoints in the unit square, a tree-plus-
extras skeleton over them, and one unit-norm channel signature per
keypoint. Mirrored keypoint pairs share a signature, so appearance alone
cannot tell them apart; only graph structure can. Feature maps are
rendered by splatting each visible keypoint's signature with a small
Gaussian onto a patch grid, standing in for a backbone.

Episodes (support/query tasks) serialize to self-describing JSON with
base64 little-endian float64 payloads, so files round-trip bit-exactly
and regeneration from a seed is byte-identical.
"""

from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .graphcore import Adjacency, from_edge_list

EPISODE_VERSION = 1
MANIFEST_VERSION = 1


class EpisodeFormatError(ValueError):
    pass


class DegenerateInstanceError(RuntimeError):
    pass


@dataclass
class CategoryConfig:
    k_min: int = 4
    k_max: int = 12
    c_raw: int = 16
    symmetry_prob: float = 0.5      # chance each potential pair slot becomes a mirrored pair
    extra_edge_max: int = 2
    margin: float = 0.15            # template points stay this far from the border
    min_separation: float = 0.1


@dataclass
class DeformConfig:
    rotation_max: float = 0.5
    scale_jitter: float = 0.15
    translation_max: float = 0.1
    joint_jitter: float = 0.01
    occlusion_rate: float = 0.1


@dataclass
class RenderConfig:
    h: int = 16
    w: int = 16
    sigma_render: float = 0.6       # in patch units
    noise: float = 0.02


@dataclass
class CategorySpec:
    category_id: int
    k: int
    template: np.ndarray            # (K, 2) in [0, 1]^2
    prior_edges: list               # [(i, j)] unweighted skeleton
    signatures: np.ndarray          # (K, C_raw), unit norm rows
    symmetric_pairs: list           # [(i, j)] sharing a signature

    def prior(self) -> Adjacency:
        return from_edge_list(self.k, [(i, j, 1.0) for i, j in self.prior_edges])


@dataclass
class Instance:
    coords: np.ndarray              # (K, 2) clamped to [0, 1]^2
    visibility: np.ndarray          # (K,) 0/1
    category_id: int


@dataclass
class FeatureMap:
    h: int
    w: int
    values: np.ndarray              # (h, w, C_raw)

    @property
    def c_raw(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(self.h * self.w, self.c_raw)


@dataclass
class Episode:
    supports: list                  # [(FeatureMap, Instance)]
    query: tuple                    # (FeatureMap, Instance)
    prior: Adjacency
    category_id: int
    seed: int

    @property
    def k(self) -> int:
        return self.prior.k


def _prufer_tree(k: int, rng: np.random.Generator):
    """Uniform random labeled tree via Prufer decoding."""
    if k == 1:
        return []
    if k == 2:
        return [(0, 1)]
    seq = rng.integers(0, k, size=k - 2)
    degree = np.ones(k, dtype=np.int64)
    for v in seq:
        degree[v] += 1
    edges = []
    leaves = sorted(int(i) for i in range(k) if degree[i] == 1)
    for v in seq:
        leaf = leaves.pop(0)
        edges.append((min(leaf, int(v)), max(leaf, int(v))))
        degree[v] -= 1
        if degree[v] == 1:
            # keep the candidate list sorted for determinism
            leaves = sorted(leaves + [int(v)])
    u, v = leaves[0], leaves[1]
    edges.append((min(u, v), max(u, v)))
    return edges


def _reflect(p: np.ndarray, center: np.ndarray, axis_dir: np.ndarray) -> np.ndarray:
    d = p - center
    along = np.dot(d, axis_dir) * axis_dir
    return center + 2 * along - d


def generate_category(rng: np.random.Generator, cfg: CategoryConfig,
                      category_id: int = 0) -> CategorySpec:
    """Sample a category: template, skeleton, signatures, mirrored pairs."""
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    lo, hi = cfg.margin, 1.0 - cfg.margin
    center = np.array([0.5, 0.5])
    theta = rng.uniform(0.0, math.pi)
    axis_dir = np.array([math.cos(theta), math.sin(theta)])

    pairs = []
    points = []
    remaining = k
    while remaining >= 2 and rng.random() < cfg.symmetry_prob:
        placed = False
        for _ in range(40):
            p = rng.uniform(lo, hi, size=2)
            q = _reflect(p, center, axis_dir)
            if (q >= lo).all() and (q <= hi).all() and np.linalg.norm(p - q) >= cfg.min_separation:
                if _separated([p, q], points, cfg.min_separation):
                    pairs.append((len(points), len(points) + 1))
                    points.extend([p, q])
                    placed = True
                    break
        if not placed:
            break
        remaining -= 2
    while len(points) < k:
        for _ in range(60):
            p = rng.uniform(lo, hi, size=2)
            if _separated([p], points, cfg.min_separation):
                break
        points.append(p)
    template = np.array(points[:k])

    edges = _prufer_tree(k, rng)
    existing = set(edges)
    n_extra = int(rng.integers(0, cfg.extra_edge_max + 1))
    for _ in range(n_extra):
        for _ in range(20):
            i, j = sorted(rng.choice(k, size=2, replace=False).tolist())
            if (i, j) not in existing:
                edges.append((i, j))
                existing.add((i, j))
                break

    signatures = rng.normal(size=(k, cfg.c_raw))
    signatures /= np.linalg.norm(signatures, axis=1, keepdims=True)
    for i, j in pairs:
        signatures[j] = signatures[i]

    return CategorySpec(category_id=category_id, k=k, template=template,
                        prior_edges=edges, signatures=signatures,
                        symmetric_pairs=pairs)


def _separated(candidates, existing, min_sep) -> bool:
    for c in candidates:
        for e in existing:
            if np.linalg.norm(c - e) < min_sep:
                return False
    return True


def apply_similarity(coords: np.ndarray, angle: float, scl: float,
                     translation) -> np.ndarray:
    """Rotate/scale about the unit-square center, then translate."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    center = np.array([0.5, 0.5])
    return (coords - center) @ rot.T * scl + center + np.asarray(translation)


def sample_instance(spec: CategorySpec, rng: np.random.Generator,
                    deform: DeformConfig) -> Instance:
    """Deformed template with per-joint jitter and random occlusions."""
    for _ in range(10):
        angle = rng.uniform(-deform.rotation_max, deform.rotation_max)
        scl = 1.0 + rng.uniform(-deform.scale_jitter, deform.scale_jitter)
        trans = rng.uniform(-deform.translation_max, deform.translation_max, size=2)
        coords = apply_similarity(spec.template, angle, scl, trans)
        coords = coords + rng.normal(0.0, deform.joint_jitter, size=coords.shape)
        coords = np.clip(coords, 0.0, 1.0)
        visibility = (rng.random(spec.k) >= deform.occlusion_rate).astype(np.int64)
        if visibility.sum() >= 2:
            return Instance(coords=coords, visibility=visibility,
                            category_id=spec.category_id)
    raise DegenerateInstanceError(
        f"could not sample >= 2 visible keypoints for category {spec.category_id}")


def _patch_centers(h: int, w: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(ii + 0.5), (jj + 0.5)], axis=2)  # in patch units


def render_query_features(inst: Instance, spec: CategorySpec,
                          render: RenderConfig,
                          rng: np.random.Generator | None = None) -> FeatureMap:
    """Splat each visible keypoint's signature with a Gaussian footprint."""
    h, w = render.h, render.w
    centers = _patch_centers(h, w)
    values = np.zeros((h, w, spec.signatures.shape[1]))
    kp_patch = inst.coords * np.array([h, w])
    for kk in range(spec.k):
        if not inst.visibility[kk]:
            continue
        d2 = ((centers - kp_patch[kk]) ** 2).sum(axis=2)
        g = np.exp(-d2 / (2.0 * render.sigma_render ** 2))
        values += g[:, :, None] * spec.signatures[kk]
    if render.noise > 0.0:
        if rng is None:
            raise ValueError("rendering with noise requires an rng")
        values += rng.normal(0.0, render.noise, size=values.shape)
    return FeatureMap(h=h, w=w, values=values)


def pool_support_keypoint_features(fm: FeatureMap, inst: Instance,
                                   sigma_pool: float = 1.0) -> np.ndarray:
    """Gaussian-mask average of the map around each visible keypoint.

    Occluded keypoints pool to the zero vector.
    """
    centers = _patch_centers(fm.h, fm.w)
    kp_patch = inst.coords * np.array([fm.h, fm.w])
    out = np.zeros((len(inst.coords), fm.c_raw))
    for kk in range(len(inst.coords)):
        if not inst.visibility[kk]:
            continue
        d2 = ((centers - kp_patch[kk]) ** 2).sum(axis=2)
        g = np.exp(-d2 / (2.0 * sigma_pool ** 2))
        out[kk] = (g[:, :, None] * fm.values).sum(axis=(0, 1)) / g.sum()
    return out


def aggregate_shots(features: list, visibilities: list) -> np.ndarray:
    """Per-keypoint mean over the shots where the keypoint was visible."""
    stack = np.stack(features)                     # (S, K, C)
    vis = np.stack(visibilities).astype(np.float64)  # (S, K)
    counts = vis.sum(axis=0)
    summed = (stack * vis[:, :, None]).sum(axis=0)
    safe = np.maximum(counts, 1.0)
    return summed / safe[:, None]


def make_episode(spec: CategorySpec, seed: int, deform: DeformConfig,
                 render: RenderConfig, shots: int = 1) -> Episode:
    """Render one support/query task; the seed fully determines it."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    supports = []
    for _ in range(shots):
        inst = sample_instance(spec, rng, deform)
        supports.append((render_query_features(inst, spec, render, rng), inst))
    q_inst = sample_instance(spec, rng, deform)
    q_map = render_query_features(q_inst, spec, render, rng)
    return Episode(supports=supports, query=(q_map, q_inst),
                   prior=spec.prior(), category_id=spec.category_id, seed=seed)


# ---------------------------------------------------------------------------
# Serialization


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(payload: str, shape) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8")
    expect = int(np.prod(shape))
    if arr.size != expect:
        raise EpisodeFormatError(f"payload holds {arr.size} floats, expected {expect}")
    return arr.reshape(shape).astype(np.float64)


def _member_to_dict(fm: FeatureMap, inst: Instance) -> dict:
    return {
        "coords": [[float(x), float(y)] for x, y in inst.coords],
        "visibility": [int(v) for v in inst.visibility],
        "featmap": _b64(fm.values),
    }


def _member_from_dict(d: dict, h: int, w: int, c_raw: int, k: int, category_id: int):
    coords = np.asarray(d["coords"], dtype=np.float64)
    if coords.shape != (k, 2):
        raise EpisodeFormatError(f"coords shape {coords.shape} does not match K={k}")
    vis = np.asarray(d["visibility"], dtype=np.int64)
    if vis.shape != (k,):
        raise EpisodeFormatError("visibility length does not match K")
    fm = FeatureMap(h=h, w=w, values=_unb64(d["featmap"], (h, w, c_raw)))
    return fm, Instance(coords=coords, visibility=vis, category_id=category_id)


def episode_to_json(ep: Episode) -> str:
    q_map, _ = ep.query
    doc = {
        "version": EPISODE_VERSION,
        "category": ep.category_id,
        "K": ep.k,
        "seed": ep.seed,
        "grid": [q_map.h, q_map.w],
        "channels": q_map.c_raw,
        "prior": [[int(i), int(j), float(ep.prior.w[i, j])]
                  for i, j in zip(*np.nonzero(ep.prior.w))],
        "supports": [_member_to_dict(fm, inst) for fm, inst in ep.supports],
        "query": _member_to_dict(*ep.query),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def episode_from_json(text: str) -> Episode:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EpisodeFormatError(f"corrupt episode file: {exc}") from exc
    if doc.get("version") != EPISODE_VERSION:
        raise EpisodeFormatError(f"unknown episode version {doc.get('version')!r}")
    k = int(doc["K"])
    h, w = (int(x) for x in doc["grid"])
    c_raw = int(doc["channels"])
    for i, j, _ in doc["prior"]:
        if not (0 <= i < k and 0 <= j < k):
            raise EpisodeFormatError(f"prior edge ({i}, {j}) out of range for K={k}")
    prior = from_edge_list(k, [(i, j, wgt) for i, j, wgt in doc["prior"]])
    supports = [_member_from_dict(d, h, w, c_raw, k, doc["category"])
                for d in doc["supports"]]
    if not supports:
        raise EpisodeFormatError("episode has no support members")
    query = _member_from_dict(doc["query"], h, w, c_raw, k, doc["category"])
    return Episode(supports=supports, query=query, prior=prior,
                   category_id=int(doc["category"]), seed=int(doc["seed"]))


def save_episode(ep: Episode, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(episode_to_json(ep))


def load_episode(path: str) -> Episode:
    with open(path, "r", encoding="ascii") as fh:
        return episode_from_json(fh.read())


# ---------------------------------------------------------------------------
# Dataset generation and manifests


@dataclass
class DatasetConfig:
    seed: int = 0
    categories: int = 10
    episodes_per_category: int = 200
    split_counts: tuple = (8, 1, 1)    # train/val/test category counts
    shots: int = 1
    category: CategoryConfig = field(default_factory=CategoryConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)
    render: RenderConfig = field(default_factory=RenderConfig)


def category_seed(dataset_seed: int, category_id: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, category_id, 0]).generate_state(1)[0])


def episode_seed(dataset_seed: int, category_id: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, category_id, 1 + index]).generate_state(1)[0])


def category_for(cfg: DatasetConfig, category_id: int) -> CategorySpec:
    rng = np.random.default_rng(category_seed(cfg.seed, category_id))
    return generate_category(rng, cfg.category, category_id)


def generate_dataset(cfg: DatasetConfig, out_dir: str) -> str:
    """Write all episode files plus a manifest; returns the manifest path."""
    if sum(cfg.split_counts) != cfg.categories:
        raise ValueError("split counts must sum to the category count")
    os.makedirs(out_dir, exist_ok=True)
    categories = {}
    for cid in range(cfg.categories):
        spec = category_for(cfg, cid)
        cat_dir = f"cat_{cid:03d}"
        os.makedirs(os.path.join(out_dir, cat_dir), exist_ok=True)
        files = []
        for idx in range(cfg.episodes_per_category):
            ep = make_episode(spec, episode_seed(cfg.seed, cid, idx),
                              cfg.deform, cfg.render, cfg.shots)
            name = os.path.join(cat_dir, f"ep_{idx:04d}.json")
            save_episode(ep, os.path.join(out_dir, name))
            files.append(name)
        categories[str(cid)] = {"dir": cat_dir, "episodes": files, "K": spec.k}

    n_tr, n_va, n_te = cfg.split_counts
    ids = list(range(cfg.categories))
    splits = {"train": ids[:n_tr], "val": ids[n_tr:n_tr + n_va],
              "test": ids[n_tr + n_va:]}
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "config": dataset_config_to_dict(cfg),
        "splits": splits,
        "categories": categories,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")))
    return path


def dataset_config_to_dict(cfg: DatasetConfig) -> dict:
    return {
        "seed": cfg.seed,
        "categories": cfg.categories,
        "episodes_per_category": cfg.episodes_per_category,
        "split_counts": list(cfg.split_counts),
        "shots": cfg.shots,
        "category": vars(cfg.category).copy(),
        "deform": vars(cfg.deform).copy(),
        "render": vars(cfg.render).copy(),
    }


def dataset_config_from_dict(d: dict) -> DatasetConfig:
    return DatasetConfig(
        seed=int(d["seed"]),
        categories=int(d["categories"]),
        episodes_per_category=int(d["episodes_per_category"]),
        split_counts=tuple(d["split_counts"]),
        shots=int(d["shots"]),
        category=CategoryConfig(**d["category"]),
        deform=DeformConfig(**d["deform"]),
        render=RenderConfig(**d["render"]),
    )


class Dataset:
    """Episode access by split, backed by a manifest directory."""

    def __init__(self, manifest_path: str):
        with open(manifest_path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
        if doc.get("version") != MANIFEST_VERSION:
            raise EpisodeFormatError(f"unknown manifest version {doc.get('version')!r}")
        self.manifest_path = manifest_path
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.doc = doc
        self.splits = doc["splits"]
        self.config = dataset_config_from_dict(doc["config"])
        self._cache = {}

    def episode_paths(self, split: str) -> list:
        paths = []
        for cid in self.splits[split]:
            cat = self.doc["categories"][str(cid)]
            paths.extend(os.path.join(self.root, p) for p in cat["episodes"])
        return paths

    def load(self, path: str) -> Episode:
        ep = self._cache.get(path)
        if ep is None:
            ep = load_episode(path)
            self._cache[path] = ep
        return ep

    def episodes(self, split: str) -> list:
        return [self.load(p) for p in self.episode_paths(split)]
