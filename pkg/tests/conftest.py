"""
Shared pytest fixtures for the scoreaug test suite.

Everything here is small on purpose: datasets of a handful of points, networks
a few units wide, configs that train for a few steps. The minute-scale
reproductions live in test_acceptance.py behind the `slow` marker.

SCOREAUG_SEED is cleared at module level so a seed exported in the calling
shell never leaks into config parsing under test.
"""

import os

import numpy as np
import pytest

import aug_transforms as aug
import net_denoiser as net
import oracle_mixture as orc

os.environ.pop('SCOREAUG_SEED', None)


def rel_err(a, b) -> float:
    '''||a - b|| / max(||b||, tiny), the relative error every numeric test uses.'''
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def image_dataset(n: int = 5, height: int = 4, width: int = 4, channels: int = 1, seed: int = 0):
    rng = np.random.default_rng(seed)
    points = rng.uniform(-1.0, 1.0, size=(n, height * width * channels))
    return orc.EmpiricalDataset(points, image_shape=(height, width, channels))


def operator_for(kind: str, height: int = 4, width: int = 4, channels: int = 1, **fields):
    params = aug.AugmentationParams(kind=kind, height=height, width=width, **fields)
    return params, aug.build_operator(params, height, width, channels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ds_2d():
    '''Four well-separated, asymmetric points in the plane.'''
    return orc.EmpiricalDataset(np.array([[1.0, 0.5], [-0.8, 0.9], [0.2, -1.1], [1.5, -0.4]]))


@pytest.fixture
def ds_img():
    return image_dataset()


@pytest.fixture
def tiny_net_cfg():
    return net.NetConfig(d=2, cond_dim=0, hidden=(16, 16), noise_embed_dim=8, sigma_data=0.8)


@pytest.fixture
def tiny_net_cfg_cond():
    return net.NetConfig(d=2, cond_dim=aug.COND_DIM, hidden=(16, 16), noise_embed_dim=8, sigma_data=0.8)


@pytest.fixture
def write_config(tmp_path):
    '''Write INI text to tmp_path and return its path.'''
    def _write(text: str, name: str = 'run.ini'):
        path = tmp_path / name
        path.write_text(text, encoding='utf-8')
        return path
    return _write


TINY_RUN_INI = """
[run]
seed = 3
out_dir = {out_dir}

[dataset]
generator = gmm2d_asym
n = 6
n_heldout = 4
seed = 0

[augmentation]
kinds = rotation

[model]
width = 8
depth = 2
noise_embed_dim = 8

[train]
variant = {variant}
batch_size = 8
steps = {steps}
eval_every = {eval_every}
n_eval = 16
eval_samples = 4

[sampler]
n_steps = 4
count = 5

[verify]
n_mc = 2000
grid_resolution = 64
"""


@pytest.fixture
def tiny_run_config(write_config, tmp_path):
    '''A config that trains a few steps; returns (path, out_dir).'''
    def _make(variant='scoreaug', steps=4, eval_every=2, name='tiny.ini'):
        out_dir = tmp_path / f'run_{variant}'
        text = TINY_RUN_INI.format(out_dir=out_dir, variant=variant, steps=steps, eval_every=eval_every)
        return write_config(text, name), out_dir
    return _make
