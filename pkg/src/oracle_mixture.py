"""
Closed-form oracle for the empirical data distribution.

p_data is a uniform mixture of Diracs at the training points; noised with
N(0, sigma^2 T T^T) it becomes a (possibly degenerate) Gaussian mixture, whose
posterior mean is the optimal denoiser. Everything is evaluated in log-space.

All functions accept a single query of shape (d,) or a batch (B, d).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

import aug_transforms as aug
import sched_noise as sch


RANK_RTOL = 1e-8
SUPPORT_RTOL = 1e-6
SUPPORT_ATOL = 1e-12


class OutOfSupportError(ValueError):
    '''Query lies off the affine support of a degenerate Gaussian mixture.'''

    def __init__(self, residual: float, tolerance: float):
        self.residual = residual
        self.tolerance = tolerance
        super().__init__(f"Query outside augmented support: residual {residual:.3e} > tolerance {tolerance:.3e}")


@dataclass
class EmpiricalDataset:
    '''
    N training points in R^d.

    sigma_data defaults to the pooled per-coordinate standard deviation.
    image_shape (H, W, C) is set for image data and required by the image
    augmentations; flat data leaves it None.
    '''
    points: np.ndarray
    sigma_data: float | None = None
    image_shape: tuple | None = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64, ndmin=2)
        if points.ndim != 2 or points.shape[0] < 1:
            raise ValueError(f"Dataset needs at least one point, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("Dataset contains non-finite values")
        if self.image_shape is not None:
            self.image_shape = tuple(int(v) for v in self.image_shape)
            if math.prod(self.image_shape) != points.shape[1]:
                raise ValueError(f"Image shape {self.image_shape} does not match dimension {points.shape[1]}")
        points.setflags(write=False)
        self.points = points
        if self.sigma_data is None:
            self.sigma_data = sch.sigma_data_estimate(points)

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def shape_hwc(self) -> tuple:
        # flat data is one pixel with d channels; d = 2 makes rotation a planar turn
        if self.image_shape is None:
            return 1, 1, self.d
        if len(self.image_shape) == 2:
            return self.image_shape[0], self.image_shape[1], 1
        return self.image_shape


@dataclass
class DegenerateGaussianEval:
    '''
    Pieces of N(0, sigma^2 T T^T) needed by the mixture formulas.

    Attributes:
        gram: sigma^2 T T^T
        pinv: its pseudoinverse (eigenvalues below RANK_RTOL * max discarded)
        rank: number of retained eigenvalues
        log_pseudodet: sum of log retained eigenvalues
        support_projector: orthogonal projector onto Im(T)
    '''
    gram: np.ndarray
    pinv: np.ndarray
    rank: int
    log_pseudodet: float
    support_projector: np.ndarray = field(repr=False)


def degenerate_gaussian(op: aug.LinearOperator, sigma: float) -> DegenerateGaussianEval:
    if not sigma > 0:
        raise ValueError(f"Noise level must be positive, got {sigma!r}")
    mat = op.matrix
    gram = sigma ** 2 * (mat @ mat.T)
    evals, evecs = np.linalg.eigh(gram)
    top = float(evals.max()) if evals.size else 0.0
    keep = evals > RANK_RTOL * top if top > 0 else np.zeros_like(evals, dtype=bool)
    vecs = evecs[:, keep]
    vals = evals[keep]
    pinv = (vecs / vals) @ vecs.T
    projector = vecs @ vecs.T
    return DegenerateGaussianEval(gram=gram, pinv=pinv, rank=int(keep.sum()),
                                  log_pseudodet=float(np.sum(np.log(vals))),
                                  support_projector=projector)


###############################################################################
###############################################################################
def _check_query(x, d: int):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d:
        raise ValueError(f"Dimension mismatch: query has {x.shape[-1]} coordinates, dataset has {d}")
    return x


def _log_kernel(x, centers, sigma: float, metric=None):
    '''-q_i / 2 for every centre; metric None means the isotropic 1/sigma^2.'''
    diff = x[..., None, :] - centers
    if metric is None:
        return -0.5 * np.sum(diff * diff, axis=-1) / sigma ** 2
    return -0.5 * np.einsum('...nd,de,...ne->...n', diff, metric, diff)


def _support_check(y, centers, gauss: DegenerateGaussianEval):
    resid = y - centers[0]
    off = resid - resid @ gauss.support_projector
    off_norm = np.linalg.norm(off, axis=-1)
    tol = SUPPORT_RTOL * np.linalg.norm(y, axis=-1) + SUPPORT_ATOL
    bad = off_norm > tol
    if np.any(bad):
        idx = np.argmax(off_norm - tol)
        raise OutOfSupportError(float(np.ravel(off_norm)[idx]), float(np.ravel(tol)[idx]))


def posterior_weights(x, sigma: float, ds: EmpiricalDataset, op: aug.LinearOperator | None = None):
    '''
    Component posteriors w_i(x), each in [0, 1] and summing to one.

    With op, the query lives in augmented space and is checked against the
    support of the transformed mixture first.
    '''
    if not sigma > 0:
        raise ValueError(f"Noise level must be positive, got {sigma!r}")
    x = _check_query(x, ds.d)
    if op is None:
        return softmax(_log_kernel(x, ds.points, sigma), axis=-1)
    centers = op.apply(ds.points)
    gauss = degenerate_gaussian(op, sigma)
    _support_check(x, centers, gauss)
    # pseudo-determinants are shared by all components and cancel here
    return softmax(_log_kernel(x, centers, sigma, gauss.pinv), axis=-1)


def optimal_denoiser(x, sigma: float, ds: EmpiricalDataset):
    '''Posterior mean E[x_0 | x] under isotropic noise.'''
    return posterior_weights(x, sigma, ds) @ ds.points


def optimal_denoiser_aug(y, sigma: float, op: aug.LinearOperator, ds: EmpiricalDataset):
    '''Posterior mean E[T x_0 | y] under noise N(0, sigma^2 T T^T).'''
    weights = posterior_weights(y, sigma, ds, op)
    return weights @ op.apply(ds.points)


def score_original(x, sigma: float, ds: EmpiricalDataset):
    x = _check_query(x, ds.d)
    return (optimal_denoiser(x, sigma, ds) - x) / sigma ** 2


def score_aug(y, sigma: float, op: aug.LinearOperator, ds: EmpiricalDataset):
    '''(T T^T)^+ (D(y; sigma, omega) - y) / sigma^2, lies in Im(T).'''
    y = _check_query(y, ds.d)
    resid = optimal_denoiser_aug(y, sigma, op, ds) - y
    return resid @ aug.gram_pseudoinverse(op).T / sigma ** 2


def log_density(x, sigma: float, ds: EmpiricalDataset):
    x = _check_query(x, ds.d)
    if not sigma > 0:
        raise ValueError(f"Noise level must be positive, got {sigma!r}")
    log_k = _log_kernel(x, ds.points, sigma)
    return logsumexp(log_k, axis=-1) - math.log(ds.N) - 0.5 * ds.d * math.log(2.0 * math.pi * sigma ** 2)


def log_density_aug(y, sigma: float, op: aug.LinearOperator, ds: EmpiricalDataset):
    '''Log-density of the transformed mixture with respect to Lebesgue measure on its support.'''
    y = _check_query(y, ds.d)
    gauss = degenerate_gaussian(op, sigma)
    if gauss.rank < 1:
        raise ValueError("Operator has rank 0; density on a point is undefined")
    centers = op.apply(ds.points)
    _support_check(y, centers, gauss)
    log_k = _log_kernel(y, centers, sigma, gauss.pinv)
    return (logsumexp(log_k, axis=-1) - math.log(ds.N)
            - 0.5 * gauss.rank * math.log(2.0 * math.pi) - 0.5 * gauss.log_pseudodet)


def posterior_variance(x, sigma: float, ds: EmpiricalDataset, op: aug.LinearOperator | None = None):
    '''
    Trace of the posterior covariance, sum_i w_i ||y_i - D||^2.

    This is the smallest achievable per-query squared error of any denoiser,
    so it floors the unweighted loss at (x, sigma).
    '''
    weights = posterior_weights(x, sigma, ds, op)
    centers = ds.points if op is None else op.apply(ds.points)
    mean = weights @ centers
    sq = np.sum((centers - mean[..., None, :]) ** 2, axis=-1)
    return np.sum(weights * sq, axis=-1)


###############################################################################
###############################################################################
def dataset_transformed(ds: EmpiricalDataset, op: aug.LinearOperator) -> EmpiricalDataset:
    '''The set {T x_i}; keeps the image shape and the original sigma_data.'''
    return EmpiricalDataset(op.apply(ds.points), sigma_data=ds.sigma_data, image_shape=ds.image_shape)


def dataset_rotation_union(ds: EmpiricalDataset) -> EmpiricalDataset:
    '''
    {R^k x_i : k = 0..3}, the dataset a rotation-augmented model without
    conditioning effectively learns. Flat 2D data rotates as a point in the plane.
    '''
    H, W, C = ds.shape_hwc()
    if H != W:
        raise ValueError(f"Rotation union needs square images, got {H}x{W}")
    stack = []
    for k in range(4):
        op = aug.build_operator(aug.AugmentationParams(kind=aug.kind_rotation, omega_r=k), H, W, C)
        stack.append(op.apply(ds.points))
    return EmpiricalDataset(np.concatenate(stack, axis=0), sigma_data=ds.sigma_data, image_shape=ds.image_shape)
