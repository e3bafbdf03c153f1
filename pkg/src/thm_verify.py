"""
Score Transformation Checks
===========================
Numerical verification of how the score of a noised empirical distribution
transforms under a smooth surjective map y = T(x), m <= n:

    grad_y log p(y) = E_{p(x|y)} [ J(x)^+ ( grad_x log p(x) - 1/2 grad_x log det(J J^T) ) ]

with J^+ = (J J^T)^{-1} J. The linear and square-diffeomorphism special cases
get their own checks, plus the row-divergence identity of J^+ the general
case rests on, and the closed-form oracle invariants.

Every check returns a VerifyReport carrying both sides and both error norms;
the suite collects reports and never raises on a single failing case.
"""

import csv, inspect, math, pathlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp, softmax

import aug_transforms as aug
import db_datasets as dbd
import oracle_mixture as orc


kind_linear_surjection = 'linear_surjection'
kind_elementwise_diffeo = 'elementwise_diffeo'
kind_projection_of_diffeo = 'projection_of_diffeo'

group_linear = 'linear'
group_diffeo = 'diffeo'
group_general = 'general'
group_divergence = 'divergence'
group_oracle = 'oracle'
list_groups = [group_linear, group_diffeo, group_general, group_divergence, group_oracle]

status_pass = 'pass'
status_fail = 'fail'
status_precondition = 'precondition_failed'
status_error = 'error'

list_csv_columns = ['case_id', 'group', 'm', 'n', 'sigma', 'n_mc_or_grid',
                    'abs_err', 'rel_err', 'threshold', 'status']

FD_STEP = 1e-5
FD_STEP_NESTED = 1e-4
RANK_SMIN = 1e-6
INVERT_XTOL = 1e-12
GRID_MIN = 64
N_MC_MIN = 1000
N_MAX = 8
FIBER_MARGIN = 10.0


class PreconditionError(ValueError):
    '''A check was called outside its hypotheses (rank, grid, dimensions, inversion).'''


###############################################################################
###############################################################################
def gradient_fd(func, x, step: float = FD_STEP):
    '''Central differences of a scalar function.'''
    x = np.array(x, dtype=np.float64)
    grad = np.zeros(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = step
        grad[k] = (func(x + e) - func(x - e)) / (2.0 * step)
    return grad


def jacobian_fd(func, x, step: float = FD_STEP):
    '''Central differences of a vector function, shape (m, n).'''
    x = np.array(x, dtype=np.float64)
    cols = []
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = step
        cols.append((np.atleast_1d(func(x + e)) - np.atleast_1d(func(x - e))) / (2.0 * step))
    return np.stack(cols, axis=-1)


def invert_elementwise(a: float, y):
    '''Solve x + a*tanh(x) = y per coordinate, |a| < 1.'''
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    x = np.empty_like(y)
    for k, yk in enumerate(y):
        try:
            # |a tanh| < 1 so the root lies within distance 2 of yk
            x[k] = brentq(lambda v: v + a * math.tanh(v) - yk, yk - 2.0, yk + 2.0, xtol=INVERT_XTOL)
        except (ValueError, RuntimeError) as e:
            raise PreconditionError(f"Inversion failed at coordinate {k} (y={yk!r}, a={a!r}): {e}") from e
    return x


@dataclass(eq=False)
class SmoothMap:
    '''
    A map R^n -> R^m with its Jacobian.

    jacobian_fn is optional; without it the Jacobian comes from central
    differences with step FD_STEP. `a` is the strength of the elementwise
    diffeomorphism x + a*tanh(x) for the two nonlinear kinds.
    '''
    n: int
    m: int
    kind: str
    eval_fn: Callable
    jacobian_fn: Callable | None = None
    a: float = 0.0
    matrix: np.ndarray | None = field(default=None, repr=False)

    def __call__(self, x):
        return self.eval_fn(np.asarray(x, dtype=np.float64))

    def jacobian(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.jacobian_fn is not None:
            return self.jacobian_fn(x)
        return jacobian_fd(self.eval_fn, x)

    def inverse(self, y):
        if self.kind != kind_elementwise_diffeo:
            raise PreconditionError(f"Map of kind {self.kind} has no global inverse")
        return invert_elementwise(self.a, y)

    def log_abs_det(self, x):
        if self.m != self.n:
            raise PreconditionError("log|det J| needs a square map")
        return float(np.linalg.slogdet(self.jacobian(x))[1])


def smooth_map_linear(T) -> SmoothMap:
    T = np.array(T, dtype=np.float64, ndmin=2)
    m, n = T.shape
    return SmoothMap(n=n, m=m, kind=kind_linear_surjection, eval_fn=lambda x: x @ T.T,
                     jacobian_fn=lambda x: T.copy(), matrix=T)


def _phi_deriv(a: float, x):
    return 1.0 + a * (1.0 - np.tanh(x) ** 2)


def smooth_map_elementwise(n: int, a: float) -> SmoothMap:
    if not -1.0 < a < 1.0:
        raise PreconditionError(f"Elementwise map x + a*tanh(x) is a diffeomorphism only for |a| < 1, got {a!r}")
    return SmoothMap(n=n, m=n, kind=kind_elementwise_diffeo, a=a,
                     eval_fn=lambda x: aug.smooth_map_apply(a, x),
                     jacobian_fn=lambda x: np.diag(_phi_deriv(a, x)))


def smooth_map_projection(n: int, m: int, a: float) -> SmoothMap:
    '''First m coordinates of the elementwise diffeomorphism.'''
    if not -1.0 < a < 1.0:
        raise PreconditionError(f"Elementwise map x + a*tanh(x) is a diffeomorphism only for |a| < 1, got {a!r}")
    if not 1 <= m <= n:
        raise PreconditionError(f"Projection needs 1 <= m <= n, got m={m} n={n}")
    return SmoothMap(n=n, m=m, kind=kind_projection_of_diffeo, a=a,
                     eval_fn=lambda x: aug.smooth_map_apply(a, x)[..., :m],
                     jacobian_fn=lambda x: np.diag(_phi_deriv(a, x))[:m])


def _check_full_row_rank(J, what: str):
    svals = np.linalg.svd(np.atleast_2d(J), compute_uv=False)
    if J.shape[0] > J.shape[1] or svals.size == 0 or svals.min() <= RANK_SMIN:
        smin = svals.min() if svals.size else 0.0
        raise PreconditionError(f"{what} is not of full row rank {J.shape[0]} (smallest singular value {smin:.3e})")


###############################################################################
###############################################################################
@dataclass
class VerifyReport:
    case_id: str
    group: str
    m: int
    n: int
    sigma: float
    n_mc_or_grid: int
    lhs: np.ndarray = field(repr=False)
    rhs: np.ndarray = field(repr=False)
    abs_err: float
    rel_err: float
    threshold: float
    status: str
    message: str = ''

    def csv_row(self) -> dict:
        return {'case_id': self.case_id, 'group': self.group, 'm': self.m, 'n': self.n,
                'sigma': f'{self.sigma:.6g}', 'n_mc_or_grid': self.n_mc_or_grid,
                'abs_err': f'{self.abs_err:.6e}', 'rel_err': f'{self.rel_err:.6e}',
                'threshold': f'{self.threshold:.3e}', 'status': self.status}


def report_make(lhs, rhs, *, case_id='', group='', m=0, n=0, sigma=0.0, n_mc_or_grid=0,
                threshold=np.inf, metric='rel') -> VerifyReport:
    '''
    Assemble a report; metric picks which error is held against threshold.
    'max_abs' uses the largest componentwise difference.
    '''
    lhs = np.atleast_1d(np.asarray(lhs, dtype=np.float64))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=np.float64))
    diff = lhs - rhs
    abs_err = float(np.max(np.abs(diff))) if metric == 'max_abs' else float(np.linalg.norm(diff))
    scale = max(float(np.linalg.norm(lhs)), float(np.linalg.norm(rhs)))
    rel_err = float(np.linalg.norm(diff)) / scale if scale > 0 else 0.0
    value = rel_err if metric == 'rel' else abs_err
    status = status_pass if np.isfinite(value) and value < threshold else status_fail
    return VerifyReport(case_id=case_id, group=group, m=m, n=n, sigma=sigma, n_mc_or_grid=n_mc_or_grid,
                        lhs=lhs, rhs=rhs, abs_err=abs_err, rel_err=rel_err, threshold=threshold, status=status)


###############################################################################
###############################################################################
def verify_linear_surjection(T, ds: orc.EmpiricalDataset, sigma: float, y, n_mc: int,
                             rng: np.random.Generator | None = None, threshold=None) -> VerifyReport:
    """
    Linear case: grad_y log p(y) = (T T^T)^{-1} T E_{p(x|y)}[grad_x log p(x)].

    lhs: central differences of the exact pushforward log-density, a mixture
        of N(T x_i, sigma^2 T T^T).
    rhs: per component, x | (T x = y) is Gaussian with mean
        x_i + T^T (T T^T)^{-1} (y - T x_i) and covariance sigma^2 (I - P_row);
        components are drawn with their pushforward posterior weights.
        For m = n the conditional is a point and no sampling happens.

    Raises:
        PreconditionError: T not of full row rank m, n > N_MAX, or n_mc < 1000 when m < n.
    """
    T = np.array(T, dtype=np.float64, ndmin=2)
    m, n = T.shape
    if ds.d != n:
        raise ValueError(f"Dimension mismatch: map takes {n} inputs, dataset has d={ds.d}")
    _check_full_row_rank(T, 'Linear map')
    if n > N_MAX:
        raise PreconditionError(f"Linear check limited to n <= {N_MAX}, got n={n}")
    if m < n and n_mc < N_MC_MIN:
        raise PreconditionError(f"Monte Carlo size {n_mc} below minimum {N_MC_MIN}")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    rng = rng if rng is not None else np.random.default_rng(0)

    gram = T @ T.T
    gram_inv = np.linalg.inv(gram)
    cov = sigma ** 2 * gram
    cov_inv = np.linalg.inv(cov)
    log_norm = 0.5 * (m * math.log(2.0 * math.pi) + np.linalg.slogdet(cov)[1]) + math.log(ds.N)
    centers = ds.points @ T.T

    def log_q(yv):
        diff = yv - centers
        return -0.5 * np.einsum('ni,ij,nj->n', diff, cov_inv, diff)

    def log_p(yv):
        return logsumexp(log_q(yv)) - log_norm

    lhs = gradient_fd(log_p, y)

    if m == n:
        x = np.linalg.solve(T, y)
        rhs = gram_inv @ T @ orc.score_original(x, sigma, ds)
        size = 0
    else:
        weights = softmax(log_q(y))
        p_row = T.T @ gram_inv @ T
        means = ds.points + (y - centers) @ (gram_inv @ T)
        comp = rng.choice(ds.N, size=n_mc, p=weights)
        eps = rng.standard_normal((n_mc, n))
        xs = means[comp] + sigma * (eps - eps @ p_row)
        rhs = gram_inv @ T @ orc.score_original(xs, sigma, ds).mean(axis=0)
        size = n_mc

    if threshold is None:
        threshold = 1e-6 if m == n else 3.0 / math.sqrt(n_mc)
    return report_make(lhs, rhs, m=m, n=n, sigma=sigma, n_mc_or_grid=size, threshold=threshold,
                       group=group_linear)

# end of def verify_linear_surjection(T, ds, sigma, y, n_mc):


def verify_diffeomorphism(smap: SmoothMap, ds: orc.EmpiricalDataset, sigma: float, y,
                          threshold: float = 1e-3) -> VerifyReport:
    """
    Square case: grad_y log p(y) = J^{-T} (grad_x log p(x) - grad_x log|det J|), x = T^{-1}(y).

    lhs: central differences of log p_X(T^{-1} y) - log|det J(T^{-1} y)|,
        inverse by per-coordinate bracketing to INVERT_XTOL.
    """
    if smap.kind != kind_elementwise_diffeo or smap.m != smap.n:
        raise PreconditionError(f"Diffeomorphism check needs an elementwise diffeo, got {smap.kind} {smap.m}x{smap.n}")
    if ds.d != smap.n:
        raise ValueError(f"Dimension mismatch: map takes {smap.n} inputs, dataset has d={ds.d}")
    if smap.n > N_MAX:
        raise PreconditionError(f"Diffeomorphism check limited to n <= {N_MAX}, got n={smap.n}")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))

    def log_p_y(yv):
        xv = smap.inverse(yv)
        return orc.log_density(xv, sigma, ds) - smap.log_abs_det(xv)

    lhs = gradient_fd(log_p_y, y)
    x = smap.inverse(y)
    grad_log_det = gradient_fd(smap.log_abs_det, x)
    rhs = np.linalg.solve(smap.jacobian(x).T, orc.score_original(x, sigma, ds) - grad_log_det)
    return report_make(lhs, rhs, m=smap.m, n=smap.n, sigma=sigma, threshold=threshold, group=group_diffeo)


def verify_general(smap: SmoothMap, ds: orc.EmpiricalDataset, sigma: float, y, grid_resolution: int,
                   threshold: float = 1e-2) -> VerifyReport:
    """
    General case for T = (first m coordinates) o phi, phi elementwise.

    The fiber {x : T(x) = y} is parameterized by its n - m free coordinates on
    a bounded trapezoid grid. Along it the fixed coordinates are phi^{-1}(y),
    so J^+ and det(J J^T) are constant on the fiber and leave the expectation.

    Raises:
        PreconditionError: m >= n, n > 3, grid_resolution < 64, wrong map kind.
    """
    if smap.kind != kind_projection_of_diffeo:
        raise PreconditionError(f"General check needs a projection of a diffeo, got {smap.kind}")
    m, n = smap.m, smap.n
    if m >= n:
        raise PreconditionError(f"General check needs m < n (m={m}, n={n}); the fiber is empty otherwise")
    if n > 3:
        raise PreconditionError(f"Fiber quadrature limited to n <= 3, got n={n}")
    if grid_resolution < GRID_MIN:
        raise PreconditionError(f"Grid resolution {grid_resolution} below minimum {GRID_MIN} per axis")
    if ds.d != n:
        raise ValueError(f"Dimension mismatch: map takes {n} inputs, dataset has d={ds.d}")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    free = n - m

    lo = ds.points[:, m:].min(axis=0) - FIBER_MARGIN * sigma
    hi = ds.points[:, m:].max(axis=0) + FIBER_MARGIN * sigma
    axes = [np.linspace(lo[k], hi[k], grid_resolution) for k in range(free)]
    mesh = np.meshgrid(*axes, indexing='ij')
    grid_free = np.stack([g.reshape(-1) for g in mesh], axis=-1)
    # trapezoid weights, tensor product over the free axes
    list_log_w1d = []
    for ax in axes:
        w1d = np.full(grid_resolution, ax[1] - ax[0])
        w1d[[0, -1]] *= 0.5
        list_log_w1d.append(np.log(w1d))
    log_w = sum(g.reshape(-1) for g in np.meshgrid(*list_log_w1d, indexing='ij'))

    def fiber(yv):
        x_fix = invert_elementwise(smap.a, yv)
        return np.hstack([np.broadcast_to(x_fix, (grid_free.shape[0], m)), grid_free]), x_fix

    def log_marginal(yv):
        xs, x_fix = fiber(yv)
        return logsumexp(orc.log_density(xs, sigma, ds) + log_w) - np.sum(np.log(_phi_deriv(smap.a, x_fix)))

    lhs = gradient_fd(log_marginal, y)

    xs, _ = fiber(y)
    post = softmax(orc.log_density(xs, sigma, ds) + log_w)
    mean_score = post @ orc.score_original(xs, sigma, ds)
    x_ref = xs[int(np.argmax(post))]
    J = smap.jacobian(x_ref)
    J_dag = np.linalg.solve(J @ J.T, J)
    half_grad = 0.5 * gradient_fd(lambda xv: np.linalg.slogdet(smap.jacobian(xv) @ smap.jacobian(xv).T)[1], x_ref)
    rhs = J_dag @ (mean_score - half_grad)
    return report_make(lhs, rhs, m=m, n=n, sigma=sigma, n_mc_or_grid=grid_resolution,
                       threshold=threshold, group=group_general)

# end of def verify_general(smap, ds, sigma, y, grid_resolution):


def divergence_identity_check(smap: SmoothMap, x, threshold: float = 1e-3) -> VerifyReport:
    """
    Row divergence of J^+ against -J^+ (1/2) grad log det(J J^T), both m-vectors.

    Second derivatives by nested central differences with step FD_STEP_NESTED.
    Reported as lhs_vector/rhs_vector with max_abs_err held against threshold.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    _check_full_row_rank(smap.jacobian(x), 'Map Jacobian')
    step = FD_STEP_NESTED

    def j_dag(xv):
        J = smap.jacobian(xv)
        return np.linalg.solve(J @ J.T, J)

    lhs = np.zeros(smap.m)
    for k in range(smap.n):
        e = np.zeros(smap.n)
        e[k] = step
        lhs += (j_dag(x + e)[:, k] - j_dag(x - e)[:, k]) / (2.0 * step)

    def log_gram_det(xv):
        J = smap.jacobian(xv)
        return np.linalg.slogdet(J @ J.T)[1]

    rhs = -j_dag(x) @ (0.5 * gradient_fd(log_gram_det, x, step=step))
    return report_make(lhs, rhs, m=smap.m, n=smap.n, threshold=threshold, metric='max_abs',
                       group=group_divergence)


###############################################################################
###############################################################################
def check_equivariance(ds: orc.EmpiricalDataset, params: aug.AugmentationParams, rng: np.random.Generator,
                       trials: int = 100, threshold: float = 1e-8) -> VerifyReport:
    '''D(T x; sigma, omega) against T D(x; sigma) on random (x, sigma); worst trial reported.'''
    H, W, C = ds.shape_hwc()
    op = aug.build_operator(params, H, W, C)
    worst = None
    for _idx in range(trials):
        sigma = float(np.exp(rng.uniform(math.log(0.2), math.log(5.0))))
        x = ds.points[rng.integers(ds.N)] + sigma * rng.standard_normal(ds.d)
        lhs = orc.optimal_denoiser_aug(op.apply(x), sigma, op, ds)
        rhs = op.apply(orc.optimal_denoiser(x, sigma, ds))
        rep = report_make(lhs, rhs, m=ds.d, n=ds.d, sigma=sigma, n_mc_or_grid=trials,
                          threshold=threshold, group=group_oracle)
        if worst is None or rep.rel_err > worst.rel_err:
            worst = rep
    return worst


def _support_basis(op: aug.LinearOperator, sigma: float):
    evals, evecs = np.linalg.eigh(orc.degenerate_gaussian(op, sigma).support_projector)
    return evecs[:, evals > 0.5]


def check_score_fd(ds: orc.EmpiricalDataset, params: aug.AugmentationParams, sigma: float,
                   rng: np.random.Generator, threshold: float = 1e-4) -> VerifyReport:
    '''score_aug against central differences of log_density_aug along an orthonormal basis of Im(T).'''
    H, W, C = ds.shape_hwc()
    op = aug.build_operator(params, H, W, C)
    x = ds.points[rng.integers(ds.N)] + sigma * rng.standard_normal(ds.d)
    y = op.apply(x)
    basis = _support_basis(op, sigma)
    lhs = np.array([(orc.log_density_aug(y + FD_STEP * u, sigma, op, ds)
                     - orc.log_density_aug(y - FD_STEP * u, sigma, op, ds)) / (2.0 * FD_STEP) for u in basis.T])
    rhs = basis.T @ orc.score_aug(y, sigma, op, ds)
    return report_make(lhs, rhs, m=basis.shape[1], n=ds.d, sigma=sigma, threshold=threshold, group=group_oracle)


def check_support_orthogonal(ds: orc.EmpiricalDataset, params: aug.AugmentationParams, sigma: float,
                             rng: np.random.Generator, threshold: float = 1e-10) -> VerifyReport:
    '''Component of score_aug outside Im(T), expected zero.'''
    H, W, C = ds.shape_hwc()
    op = aug.build_operator(params, H, W, C)
    y = op.apply(ds.points[rng.integers(ds.N)] + sigma * rng.standard_normal(ds.d))
    score = orc.score_aug(y, sigma, op, ds)
    proj = orc.degenerate_gaussian(op, sigma).support_projector
    lhs = score - proj @ score
    return report_make(lhs, np.zeros_like(lhs), m=ds.d, n=ds.d, sigma=sigma, threshold=threshold,
                       metric='abs', group=group_oracle)


def check_weights_convex(ds: orc.EmpiricalDataset, params: aug.AugmentationParams, sigma: float,
                         rng: np.random.Generator, trials: int = 20, threshold: float = 1e-12) -> VerifyReport:
    '''Posterior weights lie in [0, 1] and sum to one; lhs holds the sums, bounds folded into status.'''
    H, W, C = ds.shape_hwc()
    op = aug.build_operator(params, H, W, C)
    xs = ds.points[rng.integers(ds.N, size=trials)] + sigma * rng.standard_normal((trials, ds.d))
    weights = orc.posterior_weights(op.apply(xs), sigma, ds, op)
    rep = report_make(weights.sum(axis=-1), np.ones(trials), m=ds.d, n=ds.d, sigma=sigma, n_mc_or_grid=trials,
                      threshold=threshold, metric='max_abs', group=group_oracle)
    if np.any(weights < 0.0) or np.any(weights > 1.0):
        rep.status = status_fail
        rep.message = 'weight outside [0, 1]'
    return rep


###############################################################################
###############################################################################
@dataclass
class VerifyConfig:
    '''
    Settings for the verify suite.

    linear_map: optional extra matrix (rows of floats) checked as a linear
        surjection against a random dataset of matching dimension.
    '''
    seed: int = 0
    sigma: float = 0.7
    n_mc: int = 100000
    grid_resolution: int = 512
    linear_map: tuple | None = None


@dataclass
class VerifyCase:
    case_id: str
    group: str
    run: Callable = field(repr=False)


def _points(rows):
    return orc.EmpiricalDataset(np.asarray(rows, dtype=np.float64))


def verify_suite(cfg: VerifyConfig) -> list[VerifyCase]:
    """
    The full list of checks, in run order.

    Every case draws from its own generator seeded from (cfg.seed, case index),
    so filtering never changes the numbers a case reports.
    """
    sigma = cfg.sigma
    ds_1d = _points([[0.4]])
    ds_2d_3 = _points([[-1.0, 0.5], [0.8, 1.0], [0.2, -1.2]])
    ds_2d_2 = _points([[-0.6, 0.3], [0.9, -0.4]])
    ds_2d_4 = _points([[-1.0, 0.5], [0.8, 1.0], [0.2, -1.2], [1.3, -0.2]])
    ds_3d_4 = _points([[-1.0, 0.5, 0.2], [0.8, 1.0, -0.3], [0.2, -1.2, 0.6], [0.5, 0.1, -0.9]])
    ds_glyphs = dbd.gen_glyphs(np.random.default_rng(cfg.seed), 6)

    theta = math.pi / 6.0
    rot2 = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    t_3to2 = np.array([[1.0, 0.5, -0.3], [0.2, -0.8, 1.1]])

    cases = []

    def add(case_id, group, func):
        idx = len(cases)

        def run():
            rng = np.random.default_rng([cfg.seed, idx])
            rep = func(rng)
            rep.case_id, rep.group = case_id, group
            return rep
        cases.append(VerifyCase(case_id, group, run))

    # --- linear surjections ---
    add('lin_identity_2', group_linear,
        lambda rng: verify_linear_surjection(np.eye(2), ds_2d_3, sigma, [0.3, -0.2], cfg.n_mc, rng))
    add('lin_orthogonal_2', group_linear,
        lambda rng: verify_linear_surjection(rot2, ds_2d_3, sigma, [0.5, 0.1], cfg.n_mc, rng))
    add('lin_project_2to1', group_linear,
        lambda rng: verify_linear_surjection([[1.0, 0.0]], ds_2d_3, sigma, [1.5], cfg.n_mc, rng))
    add('lin_dense_3to2', group_linear,
        lambda rng: verify_linear_surjection(t_3to2, ds_3d_4, sigma, [2.0, -1.5], cfg.n_mc, rng))
    if cfg.linear_map is not None:
        t_custom = np.array(cfg.linear_map, dtype=np.float64, ndmin=2)
        ds_custom = _points(np.random.default_rng(cfg.seed).standard_normal((3, t_custom.shape[1])))
        add('lin_custom', group_linear,
            lambda rng: verify_linear_surjection(t_custom, ds_custom, sigma, t_custom @ ds_custom.points[0] + 0.1,
                                                 cfg.n_mc, rng))

    # --- square diffeomorphisms ---
    add('diffeo_identity_2', group_diffeo,
        lambda rng: verify_diffeomorphism(smooth_map_elementwise(2, 0.0), ds_2d_3, sigma, [0.3, -0.2]))
    add('diffeo_tanh_1', group_diffeo,
        lambda rng: verify_diffeomorphism(smooth_map_elementwise(1, 0.5), ds_1d, sigma, [0.9]))
    add('diffeo_tanh_2', group_diffeo,
        lambda rng: verify_diffeomorphism(smooth_map_elementwise(2, 0.3), ds_2d_4, sigma, [0.4, -0.5]))

    # --- general surjections (projection of a diffeomorphism) ---
    add('general_identity_2to1', group_general,
        lambda rng: verify_general(smooth_map_projection(2, 1, 0.0), ds_2d_2, sigma, [0.2], cfg.grid_resolution))
    add('general_tanh_2to1', group_general,
        lambda rng: verify_general(smooth_map_projection(2, 1, 0.3), ds_2d_2, sigma, [0.2], cfg.grid_resolution))
    add('general_tanh_3to2', group_general,
        lambda rng: verify_general(smooth_map_projection(3, 2, 0.3), ds_3d_4, sigma, [0.3, -0.1],
                                   cfg.grid_resolution))

    # --- divergence identity ---
    add('divergence_linear', group_divergence,
        lambda rng: divergence_identity_check(smooth_map_linear(t_3to2), rng.standard_normal(3)))
    add('divergence_tanh_2', group_divergence,
        lambda rng: divergence_identity_check(smooth_map_elementwise(2, 0.5), rng.standard_normal(2)))
    add('divergence_projection_3to2', group_divergence,
        lambda rng: divergence_identity_check(smooth_map_projection(3, 2, 0.5), rng.standard_normal(3)))

    # --- oracle invariants ---
    brightness = aug.AugmentationParams(kind=aug.kind_brightness, omega_b=1.7)
    rotation = aug.AugmentationParams(kind=aug.kind_rotation, omega_r=1)
    translation = aug.AugmentationParams(kind=aug.kind_translation, delta_i=1, delta_j=-2)
    cutout = aug.AugmentationParams(kind=aug.kind_cutout, c_x=0.5, c_y=0.4, h=4, w=3)
    identity = aug.AugmentationParams(kind=aug.kind_identity)

    add('oracle_equivariance_brightness', group_oracle, lambda rng: check_equivariance(ds_glyphs, brightness, rng))
    add('oracle_equivariance_rotation', group_oracle, lambda rng: check_equivariance(ds_glyphs, rotation, rng))
    for params in (identity, brightness, translation, cutout, rotation):
        add(f'oracle_score_fd_{params.kind}', group_oracle,
            lambda rng, params=params: check_score_fd(ds_glyphs, params, 2.0 * sigma, rng))
    add('oracle_support_cutout', group_oracle,
        lambda rng: check_support_orthogonal(ds_glyphs, cutout, 2.0 * sigma, rng))
    add('oracle_support_translation', group_oracle,
        lambda rng: check_support_orthogonal(ds_glyphs, translation, 2.0 * sigma, rng))
    add('oracle_weights_convex', group_oracle,
        lambda rng: check_weights_convex(ds_glyphs, cutout, 2.0 * sigma, rng))
    return cases

# end of def verify_suite(cfg):


def verify_suite_run(cases: list[VerifyCase], name_filter: str | None = None) -> list[VerifyReport]:
    """
    Run cases, optionally only those whose group equals name_filter or whose
    case_id starts with it. Failures of any kind become report rows.
    """
    func_name = inspect.stack()[0][3]
    dbh = '[{}]'.format(func_name)

    if name_filter:
        cases = [c for c in cases if c.group == name_filter or c.case_id.startswith(name_filter)]

    reports = []
    for case in cases:
        try:
            rep = case.run()
        except PreconditionError as e:
            rep = VerifyReport(case.case_id, case.group, 0, 0, 0.0, 0, np.zeros(0), np.zeros(0),
                               math.nan, math.nan, math.nan, status_precondition, str(e))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            rep = VerifyReport(case.case_id, case.group, 0, 0, 0.0, 0, np.zeros(0), np.zeros(0),
                               math.nan, math.nan, math.nan, status_error, f'{type(e).__name__}: {e}')
        if rep.status != status_pass:
            print(dbh + f' {rep.case_id}: {rep.status} rel_err={rep.rel_err:.3e} {rep.message}')
        reports.append(rep)

    n_pass = sum(rep.status == status_pass for rep in reports)
    print(f'[VERIFY] {len(reports)} checks, {n_pass} pass')
    return reports


def verify_csv_write(path, reports: list[VerifyReport]):
    pathlib.Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.DictWriter(fh, fieldnames=list_csv_columns)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.csv_row())
    return path
