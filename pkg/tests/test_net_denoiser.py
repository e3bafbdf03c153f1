import numpy as np
import pytest
import torch

import net_denoiser as net
import sched_noise as sch
from conftest import rel_err


# --- NetConfig ---------------------------------------------------------------------

@pytest.mark.parametrize('fields', [
    {'d': 0},
    {'cond_dim': -1},
    {'hidden': ()},
    {'noise_embed_dim': 7},
    {'dropout': 1.0},
    {'sigma_data': 0.0},
])
def test_config_invalid(fields):
    with pytest.raises(ValueError):
        net.NetConfig(**fields)


def test_config_json_round_trip(tiny_net_cfg_cond):
    assert net.NetConfig.from_json(tiny_net_cfg_cond.to_json()) == tiny_net_cfg_cond


def test_param_count_matches_module(tiny_net_cfg, tiny_net_cfg_cond):
    for cfg in (tiny_net_cfg, tiny_net_cfg_cond):
        model = net.net_build(cfg, seed=0)
        assert sum(p.numel() for p in model.parameters()) == cfg.param_count


def test_silu_gain_value():
    # E[silu(z)^2] for z ~ N(0, 1) is about 0.3557
    assert net.silu_gain() == pytest.approx(1.0 / np.sqrt(0.3557), rel=1e-3)


# --- initialisation / forward ------------------------------------------------------

def test_init_output_is_skip_connection(tiny_net_cfg, rng):
    model = net.net_build(tiny_net_cfg, seed=7)
    x = rng.standard_normal((6, 2))
    sigma = np.geomspace(0.01, 10.0, 6)
    c_skip, _c_out, _c_in, _c_noise = sch.preconditioning(sigma, tiny_net_cfg.sigma_data)
    np.testing.assert_allclose(net.forward(model, x, sigma), c_skip[:, None] * x, atol=1e-15)


def test_init_is_seeded(tiny_net_cfg):
    theta_a = net.params_get(net.net_build(tiny_net_cfg, seed=1))
    theta_b = net.params_get(net.net_build(tiny_net_cfg, seed=1))
    theta_c = net.params_get(net.net_build(tiny_net_cfg, seed=2))
    np.testing.assert_array_equal(theta_a, theta_b)
    assert not np.array_equal(theta_a, theta_c)


def test_init_params_resets_trained_weights(tiny_net_cfg_cond):
    model = net.net_build(tiny_net_cfg_cond, seed=4)
    fresh = net.params_get(model)
    net.params_set(model, fresh + 1.0)
    theta = net.init_params(4, model)
    np.testing.assert_array_equal(theta, fresh)
    np.testing.assert_array_equal(net.params_get(model), fresh)
    np.testing.assert_array_equal(model.out_layer.weight.detach().numpy(), 0.0)


def test_init_preactivation_scale():
    cfg = net.NetConfig(d=2, hidden=(512, 512, 512), noise_embed_dim=32)
    model = net.net_build(cfg, seed=0)
    h = torch.randn(4096, cfg.d + cfg.noise_embed_dim, dtype=net.DTYPE, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        for pre in model.preactivations(h):
            assert float(pre.var()) == pytest.approx(1.0, abs=0.15)


def test_zero_condition_matches_unconditioned(tiny_net_cfg_cond, rng):
    model = net.net_build(tiny_net_cfg_cond, seed=3)
    theta = net.params_get(model)
    net.params_set(model, theta + 0.1 * rng.standard_normal(theta.size))
    x = rng.standard_normal((4, 2))
    base = net.forward(model, x, 0.7)
    np.testing.assert_array_equal(net.forward(model, x, 0.7, np.zeros(tiny_net_cfg_cond.cond_dim)), base)
    shifted = net.forward(model, x, 0.7, np.ones(tiny_net_cfg_cond.cond_dim))
    assert not np.allclose(shifted, base)


def test_forward_dimension_mismatch(tiny_net_cfg):
    model = net.net_build(tiny_net_cfg)
    with pytest.raises(ValueError, match='Dimension mismatch'):
        net.forward(model, np.zeros((2, 3)), 0.5)


def test_params_set_wrong_size(tiny_net_cfg):
    model = net.net_build(tiny_net_cfg)
    with pytest.raises(ValueError):
        net.params_set(model, np.zeros(3))


# --- loss_and_grad ---------------------------------------------------------------

def _random_problem(cfg, rng, batch=5):
    model = net.net_build(cfg, seed=11)
    theta = net.params_get(model) + 0.2 * rng.standard_normal(cfg.param_count)
    net.params_set(model, theta)
    x_in = rng.standard_normal((batch, cfg.d))
    target = rng.standard_normal((batch, cfg.d))
    sigma = np.exp(rng.uniform(-2.0, 1.0, size=batch))
    weight = sch.loss_weight(sigma, cfg.sigma_data)
    return model, theta, (x_in, target, sigma, None, weight)


def test_gradient_matches_finite_differences(tiny_net_cfg, rng):
    model, theta, args = _random_problem(tiny_net_cfg, rng)
    _loss, grad = net.loss_and_grad(model, *args)
    coords = rng.choice(theta.size, size=50, replace=False)
    h = 1e-6
    fd = np.empty(coords.size)
    for idx, coord in enumerate(coords):
        step = np.zeros_like(theta)
        step[coord] = h
        net.params_set(model, theta + step)
        plus, _g = net.loss_and_grad(model, *args)
        net.params_set(model, theta - step)
        minus, _g = net.loss_and_grad(model, *args)
        fd[idx] = (plus - minus) / (2 * h)
    assert rel_err(grad[coords], fd) < 1e-5


def test_loss_is_weighted_mean(tiny_net_cfg, rng):
    model, _theta, (x_in, target, sigma, cond, weight) = _random_problem(tiny_net_cfg, rng)
    loss, _grad = net.loss_and_grad(model, x_in, target, sigma, cond, weight)
    expected = np.mean(weight * np.sum((net.forward(model, x_in, sigma) - target) ** 2, axis=-1))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_non_finite_loss_reports_index(tiny_net_cfg, rng):
    model, _theta, (x_in, target, sigma, cond, weight) = _random_problem(tiny_net_cfg, rng)
    x_in[3, 0] = np.nan
    with pytest.raises(net.NumericalFailureError) as exc:
        net.loss_and_grad(model, x_in, target, sigma, cond, weight)
    assert exc.value.index == 3


def test_empty_batch_rejected(tiny_net_cfg):
    model = net.net_build(tiny_net_cfg)
    with pytest.raises(ValueError):
        net.loss_and_grad(model, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), None, np.zeros(0))


# --- EMA / checkpoint ---------------------------------------------------------------

def test_ema_beta_halves_weight():
    beta = net.ema_beta(500.0)
    assert beta ** 500 == pytest.approx(0.5)
    with pytest.raises(ValueError):
        net.ema_beta(0.0)


def test_ema_update():
    out = net.ema_update(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.75)
    np.testing.assert_allclose(out, [0.75, 0.25])


def _checkpoint(cfg, rng):
    count = cfg.param_count
    return net.Checkpoint(cfg, 17, rng.standard_normal(count), rng.standard_normal(count),
                          rng.standard_normal(count), rng.random(count), adam_step=17)


def test_checkpoint_round_trip(tmp_path, tiny_net_cfg_cond, rng):
    ckpt = _checkpoint(tiny_net_cfg_cond, rng)
    path = net.checkpoint_save(tmp_path / 'sub' / 'ckpt.bin', ckpt)
    loaded = net.checkpoint_load(path)
    assert loaded.cfg == ckpt.cfg
    assert (loaded.step, loaded.adam_step) == (17, 17)
    for name in ('theta', 'ema', 'adam_m', 'adam_v'):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(ckpt, name))
    assert not (tmp_path / 'sub' / 'ckpt.bin.tmp').exists()


def test_checkpoint_net_uses_ema(tmp_path, tiny_net_cfg, rng):
    ckpt = _checkpoint(tiny_net_cfg, rng)
    np.testing.assert_array_equal(net.params_get(net.net_from_checkpoint(ckpt)), ckpt.ema)
    np.testing.assert_array_equal(net.params_get(net.net_from_checkpoint(ckpt, use_ema=False)), ckpt.theta)


def test_checkpoint_bad_magic(tmp_path, tiny_net_cfg, rng):
    path = net.checkpoint_save(tmp_path / 'ckpt.bin', _checkpoint(tiny_net_cfg, rng))
    blob = bytearray(path.read_bytes())
    blob[:8] = b'NOTACKPT'
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match='bad magic'):
        net.checkpoint_load(path)


def test_checkpoint_truncated(tmp_path, tiny_net_cfg, rng):
    path = net.checkpoint_save(tmp_path / 'ckpt.bin', _checkpoint(tiny_net_cfg, rng))
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ValueError, match='truncated'):
        net.checkpoint_load(path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        net.checkpoint_load(tmp_path / 'nope.bin')


def test_adam_state_round_trip(tiny_net_cfg, rng):
    model, _theta, args = _random_problem(tiny_net_cfg, rng)
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    for _idx in range(3):
        net.loss_and_grad(model, *args)
        optimizer.step()
    adam_m, adam_v, step = net.adam_state_get(optimizer, model)
    assert step == 3

    other = net.DenoiserNet(tiny_net_cfg)
    net.params_set(other, net.params_get(model))
    optimizer_other = torch.optim.Adam(other.parameters(), lr=1e-3)
    net.adam_state_set(optimizer_other, other, adam_m, adam_v, step)
    for opt, mdl in ((optimizer, model), (optimizer_other, other)):
        net.loss_and_grad(mdl, *args)
        opt.step()
    np.testing.assert_array_equal(net.params_get(other), net.params_get(model))
