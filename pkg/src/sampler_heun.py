"""
Deterministic probability-flow sampling with Heun's method.

Integration runs in sigma-space for either schedule. With x(t) = s(t) x_hat,
the probability-flow ODE written against sigma is

    dx/dsigma = (1/sigma + s'/(s sigma')) x - (s/sigma) D(x/s; sigma)

(all derivatives with respect to t), which reduces to (x - D)/sigma for VE.
The last step into sigma = 0 is a plain Euler step.
"""

import inspect, os
from dataclasses import dataclass

import numpy as np

import aug_transforms as aug
import db_datasets as dbd
import net_denoiser as net
import sched_noise as sch


@dataclass
class SamplerConfig:
    '''
    Attributes:
        n_steps: noise levels before the final zero (denoiser calls = 2 n_steps - 1)
        condition: augmentation held fixed for the whole trajectory, None for untransformed
        null_condition: encoding a conditioned network sees when condition is None,
            'identity' (identity one-hot) or 'zeros'
    '''
    n_steps: int = 18
    sigma_max: float = 80.0
    sigma_min: float = 0.002
    rho: float = 7.0
    condition: aug.AugmentationParams | None = None
    null_condition: str = 'identity'

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1: {self.n_steps!r}")
        if not self.sigma_max > self.sigma_min > 0:
            raise ValueError(f"Need sigma_max > sigma_min > 0, got {self.sigma_max!r}, {self.sigma_min!r}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive: {self.rho!r}")
        if self.null_condition not in ('identity', 'zeros'):
            raise ValueError(f"Unknown null condition: {self.null_condition!r}")

    @property
    def nfe(self) -> int:
        return 2 * self.n_steps - 1


def sigma_steps(cfg: SamplerConfig) -> np.ndarray:
    '''Descending rho-spaced levels from sigma_max to sigma_min, then 0; length n_steps + 1.'''
    if cfg.n_steps == 1:
        return np.array([cfg.sigma_max, 0.0])
    i = np.arange(cfg.n_steps)
    inv_rho = 1.0 / cfg.rho
    levels = (cfg.sigma_max ** inv_rho
              + i / (cfg.n_steps - 1) * (cfg.sigma_min ** inv_rho - cfg.sigma_max ** inv_rho)) ** cfg.rho
    return np.append(levels, 0.0)


def _drift(denoiser, x, sigma: float, schedule: sch.DiffusionSchedule, cond):
    t = schedule.sigma_inv(sigma)
    s = float(schedule.s(t))
    coef = 1.0 / sigma + float(schedule.s_deriv(t)) / (s * float(schedule.sigma_deriv(t)))
    return coef * x - (s / sigma) * denoiser(x / s, sigma, cond)


def heun_integrate(denoiser, sigmas, x_init, schedule: sch.DiffusionSchedule, cond=None):
    """
    Integrate the probability-flow ODE along `sigmas` (descending) from x_init.

    A zero as last level gets a plain Euler step. The result is x at the last
    level (scaled by s, which is 1 at sigma = 0).

    Raises:
        net.NumericalFailureError: non-finite state; carries the step index.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    x = np.array(x_init, dtype=np.float64)
    for idx in range(sigmas.size - 1):
        sig_cur, sig_next = float(sigmas[idx]), float(sigmas[idx + 1])
        h = sig_next - sig_cur
        d_cur = _drift(denoiser, x, sig_cur, schedule, cond)
        x_euler = x + h * d_cur
        if sig_next > 0:
            d_next = _drift(denoiser, x_euler, sig_next, schedule, cond)
            x = x + 0.5 * h * (d_cur + d_next)
        else:
            x = x_euler
        if not np.all(np.isfinite(x)):
            raise net.NumericalFailureError(f"Non-finite sampler state at step {idx} (sigma={sig_cur:.4g})",
                                            index=idx)
    return x


def heun_sample(denoiser, cfg: SamplerConfig, schedule: sch.DiffusionSchedule, rng: np.random.Generator,
                count: int, d: int, cond=None):
    """
    Draw `count` samples in R^d.

    x starts at N(0, s(t_max)^2 sigma_max^2 I) from rng; everything after is
    deterministic. cond, when given, wins over cfg.condition.
    """
    if count == 0:
        return np.empty((0, d))
    if cond is None and cfg.condition is not None:
        cond = aug.condition_vector(cfg.condition)
    sigmas = sigma_steps(cfg)
    s_max = float(schedule.s(schedule.sigma_inv(cfg.sigma_max)))
    x_init = s_max * cfg.sigma_max * rng.standard_normal((count, d))
    return heun_integrate(denoiser, sigmas, x_init, schedule, cond)


def conditioned_generation_sweep(denoiser, cfg: SamplerConfig, schedule: sch.DiffusionSchedule, seed: int,
                                 count: int, d: int, rotations=(0, 1, 2, 3), out_dir=None, image_shape=None):
    """
    Sample once per rotation condition, all from the same initial noise.

    With out_dir, writes samples_rot{k}.txt per condition (and PGMs under
    rot{k}/ for image-shaped data).

    Returns:
        dict: omega_r -> samples (count, d)
    """
    func_name = inspect.stack()[0][3]
    dbh = '[{}]'.format(func_name)

    dict_samples = {}
    for omega_r in rotations:
        params = aug.AugmentationParams(kind=aug.kind_rotation, omega_r=int(omega_r))
        samples = heun_sample(denoiser, cfg, schedule, np.random.default_rng(seed), count, d,
                              cond=aug.condition_vector(params))
        dict_samples[int(omega_r)] = samples
        if out_dir is not None:
            path = dbd.samples_write(os.path.join(out_dir, f'samples_rot{int(omega_r)}{dbd.file_ext_dataset}'),
                                     samples, image_shape)
            if image_shape is not None:
                dbd.pgm_write_batch(os.path.join(out_dir, f'rot{int(omega_r)}'), samples, image_shape)
            print(dbh + f' rotation {omega_r}: {count} samples -> {path}')
    return dict_samples
