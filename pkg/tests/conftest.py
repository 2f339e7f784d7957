import numpy as np
import pytest

from graphkp import featurizer as fz
from graphkp.model import Model, ModelConfig


def tiny_model_config(**kw):
    base = dict(c_raw=8, c=16, heads=2, enc_layers=2, sp_layers=2, dec_layers=2,
                delta_heads=2, ffn_mult=2, hops=4, bias_hidden=8, spd_table_size=12)
    base.update(kw)
    return ModelConfig(**base)


def tiny_episode(seed=0, k=5, h=8, w=8, c_raw=8, shots=1, occlusion=0.0,
                 symmetry_prob=0.0):
    cfg = fz.CategoryConfig(k_min=k, k_max=k, c_raw=c_raw,
                            symmetry_prob=symmetry_prob)
    spec = fz.generate_category(np.random.default_rng(seed), cfg, 0)
    deform = fz.DeformConfig(occlusion_rate=occlusion)
    render = fz.RenderConfig(h=h, w=w)
    return fz.make_episode(spec, seed=seed + 500, deform=deform,
                           render=render, shots=shots)


@pytest.fixture
def tiny_model():
    return Model(tiny_model_config(), seed=123)


@pytest.fixture
def episode():
    return tiny_episode()


def zero_fill(*tensors):
    for t in tensors:
        t.values[...] = 0.0
