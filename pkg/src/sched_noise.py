"""
Noise Schedules
===============
VE/VP schedules s(t), sigma(t), the training noise-level prior, the loss
weighting, and the preconditioning coefficients wrapped around the raw
denoiser network.

The drift f(t) and diffusion g(t) of the forward SDE are never represented
directly; everything downstream only needs s, sigma and their derivatives.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri


formulation_ve = 've'
formulation_vp = 'vp'
list_formulations = [formulation_ve, formulation_vp]

# ln(sigma) ~ N(P_MEAN, P_STD^2) during training
P_MEAN = -1.2
P_STD = 1.2

VP_BETA_D = 19.9
VP_BETA_MIN = 0.1
T_MIN = 1e-5


@dataclass(frozen=True)
class DiffusionSchedule:
    '''
    Scale s(t) and noise level sigma(t) of the forward process
    x_t = s(t) x_0 + s(t) sigma(t) eps.

    VE: s = 1, sigma = sqrt(t).
    VP: sigma = sqrt(exp(beta_d t^2 / 2 + beta_min t) - 1), s = 1 / sqrt(1 + sigma^2).

    t_max defaults to 1 for VP and is derived from sigma_max for VE sampling
    (see sigma_inv).
    '''
    formulation: str = formulation_ve
    sigma_data: float = 0.5
    t_min: float = T_MIN
    t_max: float = 1.0
    vp_beta_d: float = VP_BETA_D
    vp_beta_min: float = VP_BETA_MIN

    def __post_init__(self):
        if self.formulation not in list_formulations:
            raise ValueError(f"Unknown schedule formulation: {self.formulation!r} (use 've' or 'vp')")
        if not self.sigma_data > 0:
            raise ValueError(f"sigma_data must be positive: {self.sigma_data!r}")
        if not 0 < self.t_min < self.t_max:
            raise ValueError(f"Need 0 < t_min < t_max, got t_min={self.t_min!r} t_max={self.t_max!r}")
        if self.formulation == formulation_vp and not (self.vp_beta_d > 0 and self.vp_beta_min > 0):
            raise ValueError("VP constants beta_d and beta_min must be positive")

    # --- s(t), sigma(t) and their derivatives (vectorized over t) ---

    def s(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.formulation == formulation_ve:
            return np.ones_like(t)
        return 1.0 / np.sqrt(1.0 + self.sigma(t) ** 2)

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.formulation == formulation_ve:
            return np.sqrt(t)
        return np.sqrt(np.expm1(0.5 * self.vp_beta_d * t ** 2 + self.vp_beta_min * t))

    def sigma_inv(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.formulation == formulation_ve:
            return sigma ** 2
        b_d, b_min = self.vp_beta_d, self.vp_beta_min
        return (np.sqrt(b_min ** 2 + 2.0 * b_d * np.log1p(sigma ** 2)) - b_min) / b_d

    def sigma_deriv(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.formulation == formulation_ve:
            return 0.5 / np.sqrt(t)
        b_d, b_min = self.vp_beta_d, self.vp_beta_min
        sig = self.sigma(t)
        return 0.5 * (b_d * t + b_min) * (sig ** 2 + 1.0) / sig

    def s_deriv(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.formulation == formulation_ve:
            return np.zeros_like(t)
        return -0.5 * (self.vp_beta_d * t + self.vp_beta_min) * self.s(t)

    def t_grid(self, count: int):
        return np.linspace(self.t_min, self.t_max, count)

# end of class DiffusionSchedule


def schedule_check(schedule: DiffusionSchedule, count: int = 1000, tol: float = 1e-10):
    """
    Check the pointwise schedule identities on a t-grid.

    Returns:
        tuple: (is_valid, reason)
    """
    t = schedule.t_grid(count)
    s = schedule.s(t)
    sig = schedule.sigma(t)
    if np.any(np.diff(sig) <= 0):
        return False, 'sigma(t) not strictly increasing'
    if schedule.formulation == formulation_ve:
        if np.any(s != 1.0) or np.max(np.abs(sig - np.sqrt(t))) > tol:
            return False, 'VE schedule does not match s=1, sigma=sqrt(t)'
    else:
        err = np.max(np.abs(s ** 2 + (s * sig) ** 2 - 1.0))
        if err > tol:
            return False, f'VP constraint violated by {err:.3e}'
    return True, schedule.formulation


###############################################################################
###############################################################################
def perturb(x0, sigma, s, noise):
    '''x_t = s * x0 + s * sigma * noise.'''
    if np.any(np.asarray(sigma) < 0):
        raise ValueError(f"Noise level must be non-negative: {sigma!r}")
    if np.any(np.asarray(s) <= 0):
        raise ValueError(f"Scale must be positive: {s!r}")
    x0 = np.asarray(x0, dtype=np.float64)
    return s * x0 + s * sigma * np.asarray(noise, dtype=np.float64)


def sample_sigma(rng: np.random.Generator, size=None):
    '''Draw sigma with ln(sigma) ~ N(-1.2, 1.2^2).'''
    return np.exp(rng.normal(P_MEAN, P_STD, size=size))


def sample_sigma_stratified(rng: np.random.Generator, count: int):
    '''
    count draws of the same log-normal sigma, one per equal-probability
    stratum, returned in random order.
    '''
    if count < 1:
        raise ValueError(f"count must be positive: {count!r}")
    u = (rng.permutation(count) + rng.random(count)) / count
    return np.exp(P_MEAN + P_STD * ndtri(u))


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise ValueError(f"Noise level must be positive, got {sigma!r}")
    return sigma


def loss_weight(sigma, sigma_data: float):
    '''lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2.'''
    sigma = _check_sigma(sigma)
    if not sigma_data > 0:
        raise ValueError(f"sigma_data must be positive: {sigma_data!r}")
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def preconditioning(sigma, sigma_data: float):
    """
    EDM scaling functions around the raw network F:
        D(x; sigma) = c_skip x + c_out F(c_in x, c_noise)

    Returns:
        tuple: (c_skip, c_out, c_in, c_noise)
    """
    sigma = _check_sigma(sigma)
    total = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def sigma_data_estimate(points) -> float:
    """
    Pooled per-coordinate standard deviation of a dataset (N x d).

    Single-point or constant datasets have zero spread; those fall back to
    0.5 so the preconditioning stays defined.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        return 0.5
    value = math.sqrt(float(np.mean(np.var(points, axis=0))))
    return value if value > 0 else 0.5
