import math

import numpy as np
import pytest

import aug_transforms as aug
import db_datasets as dbd
import net_denoiser as net
import oracle_mixture as orc
import sampler_heun as smp
import sched_noise as sch
import train_scoreaug as trn


SIGMA_DATA = 0.5


def gaussian_denoiser(x, sigma, cond=None):
    '''Exact denoiser for N(0, SIGMA_DATA^2 I) data.'''
    sigma = np.asarray(sigma, dtype=np.float64)
    return (SIGMA_DATA ** 2 / (sigma ** 2 + SIGMA_DATA ** 2)) * x


def gaussian_flow_solution(x_init, sigma_from, sigma_to):
    # dx/dsigma = sigma x / (sigma^2 + sigma_data^2)
    return x_init * math.sqrt((sigma_to ** 2 + SIGMA_DATA ** 2) / (sigma_from ** 2 + SIGMA_DATA ** 2))


# --- SamplerConfig / sigma_steps ---------------------------------------------------

@pytest.mark.parametrize('fields', [
    {'n_steps': 0},
    {'sigma_min': 0.0},
    {'sigma_max': 0.001},
    {'rho': 0.0},
    {'null_condition': 'random'},
])
def test_sampler_config_invalid(fields):
    with pytest.raises(ValueError):
        smp.SamplerConfig(**fields)


def test_sigma_steps_shape_and_ends():
    cfg = smp.SamplerConfig()
    sigmas = smp.sigma_steps(cfg)
    assert sigmas.size == cfg.n_steps + 1
    assert sigmas[0] == pytest.approx(80.0)
    assert sigmas[-2] == pytest.approx(0.002)
    assert sigmas[-1] == 0.0
    assert np.all(np.diff(sigmas) < 0)
    assert cfg.nfe == 35


def test_sigma_steps_single_step():
    np.testing.assert_array_equal(smp.sigma_steps(smp.SamplerConfig(n_steps=1)), [80.0, 0.0])


def test_sigma_steps_rho_one_is_linear():
    sigmas = smp.sigma_steps(smp.SamplerConfig(n_steps=5, sigma_max=5.0, sigma_min=1.0, rho=1.0))
    np.testing.assert_allclose(sigmas, [5.0, 4.0, 3.0, 2.0, 1.0, 0.0])


# --- heun_integrate ---------------------------------------------------------------

def test_denoiser_call_count():
    calls = []

    def counting(x, sigma, cond=None):
        calls.append(sigma)
        return gaussian_denoiser(x, sigma)

    cfg = smp.SamplerConfig(n_steps=6)
    smp.heun_sample(counting, cfg, sch.DiffusionSchedule(sigma_data=SIGMA_DATA), np.random.default_rng(0), 3, 2)
    assert len(calls) == cfg.nfe


def test_heun_second_order_convergence():
    schedule = sch.DiffusionSchedule(sigma_data=SIGMA_DATA)
    x_init = np.array([[40.0, -25.0]])
    list_err = []
    list_n = [16, 32, 64]
    for n_steps in list_n:
        sigmas = smp.sigma_steps(smp.SamplerConfig(n_steps=n_steps))[:-1]
        out = smp.heun_integrate(gaussian_denoiser, sigmas, x_init, schedule)
        exact = gaussian_flow_solution(x_init, sigmas[0], sigmas[-1])
        list_err.append(np.linalg.norm(out - exact))
    slopes = -np.diff(np.log(list_err)) / np.diff(np.log(list_n))
    assert 1.6 <= slopes[-1] <= 2.4, slopes


def test_vp_matches_ve_in_the_limit():
    x_init = np.random.default_rng(1).standard_normal((4, 2))
    cfg = smp.SamplerConfig(n_steps=256)
    out = {}
    for formulation in sch.list_formulations:
        schedule = sch.DiffusionSchedule(formulation=formulation, sigma_data=SIGMA_DATA)
        s_max = float(schedule.s(schedule.sigma_inv(cfg.sigma_max)))
        out[formulation] = smp.heun_integrate(gaussian_denoiser, smp.sigma_steps(cfg),
                                              s_max * cfg.sigma_max * x_init, schedule)
    np.testing.assert_allclose(out[sch.formulation_vp], out[sch.formulation_ve], rtol=1e-3, atol=1e-5)


def test_non_finite_state_raises():
    def broken(x, sigma, cond=None):
        return np.full_like(x, np.nan)

    with pytest.raises(net.NumericalFailureError) as exc:
        smp.heun_integrate(broken, [2.0, 1.0, 0.0], np.zeros((1, 2)), sch.DiffusionSchedule())
    assert exc.value.index == 0


# --- heun_sample ------------------------------------------------------------------

def test_zero_count():
    out = smp.heun_sample(gaussian_denoiser, smp.SamplerConfig(), sch.DiffusionSchedule(),
                          np.random.default_rng(0), 0, 3)
    assert out.shape == (0, 3)


def test_sample_is_seed_deterministic():
    cfg = smp.SamplerConfig(n_steps=8)
    schedule = sch.DiffusionSchedule(sigma_data=SIGMA_DATA)
    first = smp.heun_sample(gaussian_denoiser, cfg, schedule, np.random.default_rng(4), 5, 2)
    second = smp.heun_sample(gaussian_denoiser, cfg, schedule, np.random.default_rng(4), 5, 2)
    np.testing.assert_array_equal(first, second)


def test_oracle_samples_land_on_training_points(ds_2d):
    denoiser = trn.oracle_denoiser_fn(ds_2d)
    schedule = sch.DiffusionSchedule(sigma_data=ds_2d.sigma_data)
    samples = smp.heun_sample(denoiser, smp.SamplerConfig(n_steps=32), schedule, np.random.default_rng(0), 16, 2)
    dist, _stats = trn.memorization_distance(samples, ds_2d)
    assert np.max(dist) < 1e-2


def _rotation_conditioned_oracle(ds):
    '''Perfect conditional model: the oracle of R^k x_i under the omega_r = k condition.'''
    oracles = {}
    for omega_r in range(4):
        params = aug.AugmentationParams(kind=aug.kind_rotation, omega_r=omega_r)
        op = aug.build_operator(params, 1, 1, 2)
        oracles[tuple(aug.condition_vector(params))] = trn.oracle_denoiser_fn(orc.dataset_transformed(ds, op))

    def denoise(x, sigma, cond=None):
        key = tuple(np.asarray(cond, dtype=np.float64).reshape(-1, aug.COND_DIM)[0])
        return oracles[key](x, sigma)
    return denoise


def test_half_turn_condition_generates_rotated_data(ds_2d):
    schedule = sch.DiffusionSchedule(sigma_data=ds_2d.sigma_data)
    dict_samples = smp.conditioned_generation_sweep(_rotation_conditioned_oracle(ds_2d), smp.SamplerConfig(n_steps=32),
                                                    schedule, 3, 16, 2, rotations=(0, 2))
    half_turn = orc.EmpiricalDataset(-ds_2d.points, sigma_data=ds_2d.sigma_data)
    _dist, to_rotated = trn.memorization_distance(dict_samples[2], half_turn)
    _dist, to_original = trn.memorization_distance(dict_samples[2], ds_2d)
    assert to_rotated['p90'] < 1e-2
    assert to_original['p10'] > 0.5
    _dist, upright = trn.memorization_distance(dict_samples[0], ds_2d)
    assert upright['p90'] < 1e-2


def test_condition_is_passed_through():
    seen = []

    def recording(x, sigma, cond=None):
        seen.append(cond)
        return gaussian_denoiser(x, sigma)

    params = aug.AugmentationParams(kind=aug.kind_rotation, omega_r=2)
    cfg = smp.SamplerConfig(n_steps=2, condition=params)
    smp.heun_sample(recording, cfg, sch.DiffusionSchedule(), np.random.default_rng(0), 1, 2)
    assert all(np.array_equal(cond, aug.condition_vector(params)) for cond in seen)


def test_rotation_sweep_writes_files(tmp_path):
    cfg = smp.SamplerConfig(n_steps=3)
    shape = (2, 2, 1)
    dict_samples = smp.conditioned_generation_sweep(gaussian_denoiser, cfg, sch.DiffusionSchedule(), 11, 3, 4,
                                                    out_dir=tmp_path, image_shape=shape)
    assert sorted(dict_samples) == [0, 1, 2, 3]
    for omega_r in range(4):
        points, image_shape = dbd.samples_read(tmp_path / f'samples_rot{omega_r}.txt')
        np.testing.assert_array_equal(points, dict_samples[omega_r])
        assert image_shape == shape
        assert len(list((tmp_path / f'rot{omega_r}').glob('*.pgm'))) == 3
    # same initial noise, and this denoiser ignores the condition
    np.testing.assert_array_equal(dict_samples[0], dict_samples[3])
