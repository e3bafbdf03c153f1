"""
Augmentation Operators
======================
Linear augmentation operators acting on flattened images, the random draw of
their parameters, and the condition vectors the denoiser receives.

Images are flattened row-major and channel-last: pixel (r, c) channel ch sits
at index (r * W + c) * C + ch. Every spatial operator acts identically on each
channel.

Kinds provided:
- identity
- brightness:       omega_b * I
- translation:      shift by (delta_i rows, delta_j cols), zero fill
- cutout:           zero an (h, w) box centred at fractional (c_x, c_y)
- rotation:         omega_r counter-clockwise quarter turns (numpy.rot90)
- smooth_nonlinear: elementwise x + a * tanh(x), only for the nonlinear loss
"""

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np


kind_identity = 'identity'
kind_brightness = 'brightness'
kind_translation = 'translation'
kind_cutout = 'cutout'
kind_rotation = 'rotation'
kind_smooth_nonlinear = 'smooth_nonlinear'

list_aug_kinds = [kind_identity, kind_brightness, kind_translation, kind_cutout,
                  kind_rotation, kind_smooth_nonlinear]
list_linear_kinds = list_aug_kinds[:-1]

# kinds whose parameter range already contains the identity mapping with
# positive probability (delta = 0, omega_r = 0)
list_kinds_with_identity = [kind_identity, kind_translation, kind_rotation]

# parameter block of the condition vector, in order
list_cond_params = ['log_omega_b', 'delta_i', 'delta_j', 'cut_h', 'cut_w', 'omega_r', 'a']
COND_DIM = len(list_aug_kinds) + len(list_cond_params)

MATERIALIZE_DIM_MAX = 4096
RANK_RTOL = 1e-8

# published per-dataset augmentation mixes; values are (kinds, B, R_t, R_c)
dict_aug_presets = {
    'cifar10':     ((kind_brightness, kind_translation, kind_cutout, kind_rotation), 2.0, 0.25, 0.5),
    'ffhq':        ((kind_translation, kind_cutout, kind_rotation), 2.0, 0.25, 0.5),
    'afhq':        ((kind_translation, kind_cutout, kind_rotation), 2.0, 0.25, 0.5),
    'cifar10_nla': ((kind_translation, kind_cutout), 2.0, 0.125, 0.25),
    'ffhq_nla':    ((kind_identity, kind_translation, kind_cutout), 2.0, 0.125, 0.25),
    'afhq_nla':    ((kind_brightness, kind_translation, kind_cutout), 2.0, 0.125, 0.25),
    'sit':         ((kind_translation,), 2.0, 0.0325, 0.5),
}


@dataclass(frozen=True)
class AugmentationParams:
    '''
    One draw omega from the augmentation prior.

    Only the fields belonging to `kind` are meaningful; the rest keep their
    neutral defaults. height/width record the image shape the draw was made
    for and are needed by the normalized condition encoding.
    '''
    kind: str = kind_identity
    omega_b: float = 1.0
    delta_i: int = 0
    delta_j: int = 0
    c_x: float = 0.5
    c_y: float = 0.5
    h: int = 0
    w: int = 0
    omega_r: int = 0
    a: float = 0.0
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        if self.kind not in list_aug_kinds:
            raise ValueError(f"Unknown augmentation kind: {self.kind!r}")
        if self.kind == kind_brightness and not self.omega_b > 0:
            raise ValueError(f"Brightness factor must be positive: {self.omega_b!r}")
        if self.kind == kind_cutout and (self.h < 1 or self.w < 1):
            raise ValueError(f"Cutout extent must be at least 1x1: h={self.h!r} w={self.w!r}")
        if self.kind == kind_cutout and not (0.0 <= self.c_x <= 1.0 and 0.0 <= self.c_y <= 1.0):
            raise ValueError(f"Cutout centre must lie in [0,1]^2: ({self.c_x!r}, {self.c_y!r})")
        if self.kind == kind_rotation and self.omega_r not in (0, 1, 2, 3):
            raise ValueError(f"Quarter-turn count must be in 0..3: {self.omega_r!r}")
        if self.kind == kind_smooth_nonlinear and not -1.0 < self.a < 1.0:
            raise ValueError(f"Nonlinear strength must lie in (-1, 1): {self.a!r}")

    @property
    def is_linear(self) -> bool:
        return self.kind in list_linear_kinds


@dataclass(frozen=True)
class AugmentConfig:
    '''
    Enabled kinds and their ranges, plus the image shape draws are made for.

    Attributes:
        kinds: enabled kinds (identity is added when no enabled kind can
            produce the identity mapping, see kinds_support()).
        brightness_max: B, brightness factor drawn from [1/B, B].
        translate_ratio: R_t, shifts bounded by floor(R_t * W) / floor(R_t * H).
        cutout_ratio: R_c, cutout extent bounded by R_c * H, R_c * W.
        nonlinear_max: bound on |a| for smooth_nonlinear draws.
    '''
    kinds: tuple = (kind_identity,)
    brightness_max: float = 2.0
    translate_ratio: float = 0.25
    cutout_ratio: float = 0.5
    nonlinear_max: float = 0.3
    height: int = 1
    width: int = 1
    channels: int = 1

    def __post_init__(self):
        for kind in self.kinds:
            if kind not in list_aug_kinds:
                raise ValueError(f"Unknown augmentation kind in config: {kind!r}")
        if self.brightness_max < 1.0:
            raise ValueError(f"B must be >= 1: {self.brightness_max!r}")
        if not 0.0 <= self.translate_ratio <= 1.0:
            raise ValueError(f"R_t must lie in [0, 1]: {self.translate_ratio!r}")
        if not 0.0 < self.cutout_ratio <= 1.0:
            raise ValueError(f"R_c must lie in (0, 1]: {self.cutout_ratio!r}")
        if not 0.0 <= self.nonlinear_max < 1.0:
            raise ValueError(f"a_max must lie in [0, 1): {self.nonlinear_max!r}")
        if kind_rotation in self.kinds and self.height != self.width:
            raise ValueError(f"Rotation needs square images, got {self.height}x{self.width}")

    @property
    def dim(self) -> int:
        return self.height * self.width * self.channels


def aug_config_from_preset(name: str, height: int, width: int, channels: int = 1) -> AugmentConfig:
    if name not in dict_aug_presets:
        raise ValueError(f"Unknown augmentation preset: {name!r} (known: {sorted(dict_aug_presets)})")
    kinds, b, r_t, r_c = dict_aug_presets[name]
    return AugmentConfig(kinds=kinds, brightness_max=b, translate_ratio=r_t, cutout_ratio=r_c,
                         height=height, width=width, channels=channels)


###############################################################################
###############################################################################
class LinearOperator:
    '''
    Linear map R^n -> R^m acting on the last axis of its input.

    Subclasses implement _apply and _adjoint; leading axes are batch axes.
    The dense matrix is built once on first access of `matrix` and is
    read-only afterwards, so an operator can be shared between threads.

    Example:
        op = build_operator(AugmentationParams(kind='rotation', omega_r=1), 8, 8, 1)
        y = op.apply(x)                # x: (..., 64)
        P = gram_pseudoinverse(op)     # (T T^T)^+
    '''

    def __init__(self, m: int, n: int):
        self.m = int(m)
        self.n = int(n)

    @property
    def dims(self) -> tuple[int, int]:
        return self.m, self.n

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n:
            raise ValueError(f"Dimension mismatch: operator takes {self.n} inputs, got {x.shape[-1]}")
        return self._apply(x)

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.m:
            raise ValueError(f"Dimension mismatch: adjoint takes {self.m} inputs, got {y.shape[-1]}")
        return self._adjoint(y)

    def materialize(self) -> np.ndarray:
        if max(self.m, self.n) > MATERIALIZE_DIM_MAX:
            raise ValueError(f"Operator too large to materialize: {self.m}x{self.n} > {MATERIALIZE_DIM_MAX}")
        # row j of apply(I) is T e_j, i.e. column j of T
        return np.ascontiguousarray(self.apply(np.eye(self.n)).T)

    @cached_property
    def matrix(self) -> np.ndarray:
        mat = self.materialize()
        mat.setflags(write=False)
        return mat

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError


class DenseOperator(LinearOperator):
    '''Operator backed by an explicit m x n matrix.'''

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=np.float64, ndmin=2)
        super().__init__(*matrix.shape)
        matrix.setflags(write=False)
        self._mat = matrix

    def _apply(self, x):
        return x @ self._mat.T

    def _adjoint(self, y):
        return y @ self._mat

    def materialize(self) -> np.ndarray:
        return self._mat.copy()


class IndexOperator(LinearOperator):
    '''
    Square operator out[i] = scale * x[src[i]], with src[i] = -1 meaning zero.

    Covers all four image augmentations: identity/brightness (src = arange),
    translation and cutout (zero fill), rotation (permutation). src must be
    injective on its valid entries so the adjoint is a plain scatter.
    '''

    def __init__(self, src, scale: float = 1.0):
        src = np.asarray(src, dtype=np.int64)
        super().__init__(src.size, src.size)
        valid = src >= 0
        if np.unique(src[valid]).size != int(valid.sum()):
            raise ValueError("Index operator source map must be injective")
        src.setflags(write=False)
        valid.setflags(write=False)
        self.src = src
        self.valid = valid
        self.scale = float(scale)
        self._src_safe = np.where(valid, src, 0)

    def _apply(self, x):
        out = np.where(self.valid, x[..., self._src_safe], 0.0)
        if self.scale != 1.0:
            out = self.scale * out
        return out

    def _adjoint(self, y):
        out = np.zeros(y.shape[:-1] + (self.n,), dtype=np.float64)
        vals = y[..., self.valid]
        if self.scale != 1.0:
            vals = self.scale * vals
        out[..., self.src[self.valid]] = vals
        return out


# --- spatial index maps (cached, integer-keyed) ------------------------------

def _spatial_to_full(src_pix: np.ndarray, channels: int) -> np.ndarray:
    '''Expand a per-pixel source map to per-(pixel, channel) indices.'''
    ch = np.arange(channels)
    full = np.where(src_pix[:, None] >= 0, src_pix[:, None] * channels + ch[None, :], -1)
    return full.reshape(-1)


@lru_cache(maxsize=1024)
def _cached_translation_src(height: int, width: int, channels: int, delta_i: int, delta_j: int):
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    src_r = rows - delta_i
    src_c = cols - delta_j
    inside = (src_r >= 0) & (src_r < height) & (src_c >= 0) & (src_c < width)
    src_pix = np.where(inside, src_r * width + src_c, -1).reshape(-1)
    return _spatial_to_full(src_pix, channels)


def cutout_box(c_x: float, c_y: float, h: int, w: int, height: int, width: int):
    '''Return (row0, row1, col0, col1) of the zeroed box, half-open, clipped.'''
    row0 = int(math.floor(c_y * height - h / 2.0 + 0.5))
    col0 = int(math.floor(c_x * width - w / 2.0 + 0.5))
    return max(row0, 0), min(row0 + h, height), max(col0, 0), min(col0 + w, width)


@lru_cache(maxsize=4096)
def _cached_cutout_src(height: int, width: int, channels: int, row0: int, row1: int, col0: int, col1: int):
    keep = np.ones((height, width), dtype=bool)
    keep[row0:row1, col0:col1] = False
    src_pix = np.where(keep.reshape(-1), np.arange(height * width), -1)
    return _spatial_to_full(src_pix, channels)


@lru_cache(maxsize=64)
def _cached_rotation_src(height: int, width: int, channels: int, omega_r: int):
    grid = np.arange(height * width).reshape(height, width)
    src_pix = np.rot90(grid, k=omega_r).reshape(-1)
    return _spatial_to_full(src_pix, channels)


###############################################################################
###############################################################################
def build_operator(params: AugmentationParams, H: int, W: int, channels: int) -> LinearOperator:
    """
    Build the d x d operator T_omega for a linear augmentation, d = H*W*channels.

    Raises:
        ValueError: shape mismatch with the shape recorded in params, a cutout
            or shift that does not fit the image, odd rotation of a non-square
            image, or kind smooth_nonlinear (handled by apply_transform only).
    """
    if H < 1 or W < 1 or channels < 1:
        raise ValueError(f"Invalid image shape: {H}x{W}x{channels}")
    if (params.height is not None and params.height != H) or (params.width is not None and params.width != W):
        raise ValueError(
            f"Dimension mismatch: params drawn for {params.height}x{params.width}, operator requested for {H}x{W}")
    d = H * W * channels

    if params.kind == kind_smooth_nonlinear:
        raise ValueError("smooth_nonlinear has no matrix form; route it through the nonlinear loss")

    if params.kind == kind_identity:
        return IndexOperator(np.arange(d))

    if params.kind == kind_brightness:
        return IndexOperator(np.arange(d), scale=params.omega_b)

    if params.kind == kind_translation:
        if abs(params.delta_i) >= H or abs(params.delta_j) >= W:
            raise ValueError(f"Shift ({params.delta_i}, {params.delta_j}) does not fit a {H}x{W} image")
        return IndexOperator(_cached_translation_src(H, W, channels, int(params.delta_i), int(params.delta_j)))

    if params.kind == kind_cutout:
        if params.h > H or params.w > W:
            raise ValueError(f"Cutout {params.h}x{params.w} larger than the {H}x{W} image")
        box = cutout_box(params.c_x, params.c_y, params.h, params.w, H, W)
        return IndexOperator(_cached_cutout_src(H, W, channels, *box))

    if params.kind == kind_rotation:
        if params.omega_r % 2 == 1 and H != W:
            raise ValueError(f"Odd quarter turns need a square image, got {H}x{W}")
        if H == 1 and W == 1 and channels == 2:
            # a single two-channel pixel is a point in the plane: turn the point itself
            return DenseOperator(np.linalg.matrix_power(np.array([[0.0, -1.0], [1.0, 0.0]]), int(params.omega_r)))
        return IndexOperator(_cached_rotation_src(H, W, channels, int(params.omega_r)))

    raise ValueError(f"Unhandled augmentation kind: {params.kind!r}")

# end of def build_operator(params, H, W, channels):


def gram_pseudoinverse(op: LinearOperator) -> np.ndarray:
    '''(T T^T)^+ with singular values below RANK_RTOL * largest discarded.'''
    mat = op.matrix
    gram = mat @ mat.T
    return np.linalg.pinv(gram, rcond=RANK_RTOL, hermitian=True)


def smooth_map_apply(a: float, x):
    '''Elementwise x + a*tanh(x); a diffeomorphism of R for |a| < 1.'''
    x = np.asarray(x, dtype=np.float64)
    return x + a * np.tanh(x)


def apply_transform(params: AugmentationParams, x, H: int, W: int, channels: int):
    '''Apply any augmentation kind, linear or not, along the last axis of x.'''
    if params.kind == kind_smooth_nonlinear:
        return smooth_map_apply(params.a, x)
    return build_operator(params, H, W, channels).apply(x)


###############################################################################
###############################################################################
def kinds_support(cfg: AugmentConfig) -> list[str]:
    '''
    Kinds sample_params() chooses from, uniformly.

    Identity is prepended when none of the enabled kinds can produce the
    identity mapping, so every prior puts mass on unchanged samples.
    '''
    if not cfg.kinds:
        raise ValueError("Augmentation config has an empty kind list")
    support = list(dict.fromkeys(cfg.kinds))
    if not any(kind in list_kinds_with_identity for kind in support):
        support.insert(0, kind_identity)
    return support


def sample_params(rng: np.random.Generator, cfg: AugmentConfig) -> AugmentationParams:
    """
    Draw one omega: a uniform kind from kinds_support(cfg), then parameters
    uniform over that kind's range. Consumes draws from rng only.
    """
    support = kinds_support(cfg)
    kind = support[int(rng.integers(len(support)))] if len(support) > 1 else support[0]
    H, W = cfg.height, cfg.width

    if kind == kind_identity:
        return AugmentationParams(kind=kind, height=H, width=W)

    if kind == kind_brightness:
        b = cfg.brightness_max
        return AugmentationParams(kind=kind, omega_b=float(rng.uniform(1.0 / b, b)), height=H, width=W)

    if kind == kind_translation:
        max_i = int(math.floor(cfg.translate_ratio * W))
        max_j = int(math.floor(cfg.translate_ratio * H))
        max_i = min(max_i, H - 1)
        max_j = min(max_j, W - 1)
        delta_i = int(rng.integers(-max_i, max_i + 1))
        delta_j = int(rng.integers(-max_j, max_j + 1))
        return AugmentationParams(kind=kind, delta_i=delta_i, delta_j=delta_j, height=H, width=W)

    if kind == kind_cutout:
        max_h = max(1, int(math.floor(cfg.cutout_ratio * H)))
        max_w = max(1, int(math.floor(cfg.cutout_ratio * W)))
        c_x, c_y = rng.uniform(0.0, 1.0, size=2)
        h = int(rng.integers(1, max_h + 1))
        w = int(rng.integers(1, max_w + 1))
        return AugmentationParams(kind=kind, c_x=float(c_x), c_y=float(c_y), h=h, w=w, height=H, width=W)

    if kind == kind_rotation:
        return AugmentationParams(kind=kind, omega_r=int(rng.integers(4)), height=H, width=W)

    a_max = cfg.nonlinear_max
    return AugmentationParams(kind=kind, a=float(rng.uniform(-a_max, a_max)), height=H, width=W)

# end of def sample_params(rng, cfg):


def params_validate(params: AugmentationParams, cfg: AugmentConfig):
    """
    Check a draw against the ranges of cfg.

    Returns:
        tuple: (is_valid, reason)
    """
    H, W = cfg.height, cfg.width
    if params.kind == kind_brightness:
        b = cfg.brightness_max
        if not (1.0 / b) <= params.omega_b <= b:
            return False, f'omega_b {params.omega_b} outside [1/{b}, {b}]'
    elif params.kind == kind_translation:
        if abs(params.delta_i) > math.floor(cfg.translate_ratio * W):
            return False, f'|delta_i| {abs(params.delta_i)} exceeds floor(R_t*W)'
        if abs(params.delta_j) > math.floor(cfg.translate_ratio * H):
            return False, f'|delta_j| {abs(params.delta_j)} exceeds floor(R_t*H)'
    elif params.kind == kind_cutout:
        if params.h > max(1, cfg.cutout_ratio * H) or params.w > max(1, cfg.cutout_ratio * W):
            return False, f'cutout {params.h}x{params.w} exceeds R_c bounds'
    elif params.kind == kind_smooth_nonlinear:
        if abs(params.a) > cfg.nonlinear_max:
            return False, f'|a| {abs(params.a)} exceeds a_max {cfg.nonlinear_max}'
    return True, params.kind


###############################################################################
###############################################################################
def condition_vector(params: AugmentationParams) -> np.ndarray:
    """
    Fixed-length encoding of omega: one-hot kind block, then the normalized
    parameter block in list_cond_params order.

    The cutout centre is not encoded, only its normalized extent (h/H, w/W).
    Identity leaves the parameter block at zero.

    Examples:
        identity                              -> onehot(identity) + zeros
        cutout c=(0.3, 0.7), h=4, w=2, 8x8    -> (..., 0.5, 0.25, ...)
    """
    vec = np.zeros(COND_DIM, dtype=np.float64)
    vec[list_aug_kinds.index(params.kind)] = 1.0
    block = vec[len(list_aug_kinds):]
    slot = {name: idx for idx, name in enumerate(list_cond_params)}

    if params.kind in (kind_translation, kind_cutout) and (params.height is None or params.width is None):
        raise ValueError(f"{params.kind} condition needs the image shape recorded in params")

    if params.kind == kind_brightness:
        block[slot['log_omega_b']] = math.log(params.omega_b)
    elif params.kind == kind_translation:
        block[slot['delta_i']] = params.delta_i / params.height
        block[slot['delta_j']] = params.delta_j / params.width
    elif params.kind == kind_cutout:
        block[slot['cut_h']] = params.h / params.height
        block[slot['cut_w']] = params.w / params.width
    elif params.kind == kind_rotation:
        block[slot['omega_r']] = params.omega_r / 4.0
    elif params.kind == kind_smooth_nonlinear:
        block[slot['a']] = params.a
    return vec


def condition_null(mode: str = 'identity') -> np.ndarray:
    '''Sampling-time condition for untransformed output: identity encoding or all zeros.'''
    if mode == 'identity':
        return condition_vector(AugmentationParams(kind=kind_identity))
    if mode == 'zeros':
        return np.zeros(COND_DIM, dtype=np.float64)
    raise ValueError(f"Unknown null condition mode: {mode!r} (use 'identity' or 'zeros')")


def params_format(params: AugmentationParams) -> str:
    '''Inverse of params_parse for the fields the compact form carries.'''
    if params.kind == kind_identity:
        return kind_identity
    if params.kind == kind_rotation:
        return f'{kind_rotation}:{params.omega_r}'
    if params.kind == kind_brightness:
        return f'{kind_brightness}:{params.omega_b!r}'
    if params.kind == kind_translation:
        return f'{kind_translation}:{params.delta_i},{params.delta_j}'
    if params.kind == kind_cutout:
        return f'{kind_cutout}:{params.h},{params.w}'
    return f'{kind_smooth_nonlinear}:{params.a!r}'


def params_parse(text: str, H: int | None = None, W: int | None = None) -> AugmentationParams:
    """
    Parse a compact 'kind:value[,value...]' string (CLI --condition).

    Examples:
        'identity'           -> identity
        'rotation:2'         -> rotation, omega_r=2
        'brightness:1.5'     -> brightness, omega_b=1.5
        'translation:1,-2'   -> translation, delta_i=1, delta_j=-2
        'cutout:4,2'         -> cutout h=4, w=2 (centre irrelevant to conditioning)
    """
    kind, _, rest = text.strip().partition(':')
    values = [v.strip() for v in rest.split(',') if v.strip()] if rest else []
    try:
        if kind == kind_identity:
            return AugmentationParams(kind=kind, height=H, width=W)
        if kind == kind_rotation:
            return AugmentationParams(kind=kind, omega_r=int(values[0]), height=H, width=W)
        if kind == kind_brightness:
            return AugmentationParams(kind=kind, omega_b=float(values[0]), height=H, width=W)
        if kind == kind_translation:
            return AugmentationParams(kind=kind, delta_i=int(values[0]), delta_j=int(values[1]), height=H, width=W)
        if kind == kind_cutout:
            return AugmentationParams(kind=kind, h=int(values[0]), w=int(values[1]), height=H, width=W)
        if kind == kind_smooth_nonlinear:
            return AugmentationParams(kind=kind, a=float(values[0]), height=H, width=W)
    except (IndexError, ValueError) as e:
        raise ValueError(f"Invalid condition {text!r}: {e}") from e
    raise ValueError(f"Invalid condition {text!r}: unknown kind {kind!r}")
