import os, inspect, math
import pathlib

import numpy as np
from PIL import Image

import oracle_mixture as orc


file_ext_dataset = '.txt'
file_ext_pgm = '.pgm'
header_image_tag = '# image'
value_fmt = '%.17g'

gen_gmm2d_asym = 'gmm2d_asym'
gen_glyphs8x8 = 'glyphs8x8'
gen_gaussian = 'gaussian'

# 2D mixture with no rotational symmetry: unequal weights, unequal spreads
list_gmm2d_means = [(1.5, 0.5), (-0.4, 1.2), (0.3, -1.1)]
list_gmm2d_stds = [0.15, 0.25, 0.1]
list_gmm2d_weights = [0.5, 0.3, 0.2]

GLYPH_SIZE = 8
GLYPH_BG = -1.0
GLYPH_FG = 1.0


###############################################################################
###############################################################################
def samples_write(path, points, image_shape=None):
    """
    Write N x d values in the dataset text format.

    Layout:
        d N
        # image H W C        (only for image-shaped data)
        x_11 x_12 ... x_1d   (N rows, %.17g, re-parses bit-identically)

    Args:
        path: destination file
        points: array (N, d); N may be 0
        image_shape: optional (H, W, C)
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"Expected an (N, d) array, got shape {points.shape}")
    N, d = points.shape
    pathlib.Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(f'{d} {N}\n')
        if image_shape is not None:
            fh.write(header_image_tag + ' ' + ' '.join(str(int(v)) for v in image_shape) + '\n')
        if N:
            np.savetxt(fh, points, fmt=value_fmt)
    return path


def samples_read(path):
    """
    Read a dataset/sample text file.

    Returns:
        tuple: (points (N, d) float64, image_shape or None)
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    lines = path.read_text(encoding='utf-8').splitlines()
    if not lines:
        raise ValueError(f"{path}:1: empty dataset file")
    try:
        d, N = (int(tok) for tok in lines[0].split())
    except ValueError as e:
        raise ValueError(f"{path}:1: header must be 'd N', got {lines[0]!r}") from e

    image_shape = None
    body_start = 1
    if len(lines) > 1 and lines[1].startswith(header_image_tag):
        image_shape = tuple(int(tok) for tok in lines[1][len(header_image_tag):].split())
        if math.prod(image_shape) != d:
            raise ValueError(f"{path}:2: image shape {image_shape} does not match d={d}")
        body_start = 2

    rows = [line for line in lines[body_start:] if line.strip()]
    if len(rows) != N:
        raise ValueError(f"{path}: header declares {N} rows, found {len(rows)}")
    points = np.empty((N, d), dtype=np.float64)
    for idx, line in enumerate(rows):
        values = line.split()
        if len(values) != d:
            raise ValueError(f"{path}:{body_start + idx + 1}: expected {d} values, found {len(values)}")
        points[idx] = [float(v) for v in values]
    return points, image_shape


def dataset_write(path, ds: orc.EmpiricalDataset):
    return samples_write(path, ds.points, ds.image_shape)


def dataset_read(path, sigma_data=None) -> orc.EmpiricalDataset:
    points, image_shape = samples_read(path)
    if points.shape[0] < 1:
        raise ValueError(f"{path}: dataset must contain at least one point")
    return orc.EmpiricalDataset(points, sigma_data=sigma_data, image_shape=image_shape)


def pgm_write(path, image, image_shape):
    '''
    8-bit grayscale PGM, linear map [-1, 1] -> [0, 255], clamped.
    Multi-channel images are written from their first channel.
    '''
    H, W = image_shape[0], image_shape[1]
    C = image_shape[2] if len(image_shape) > 2 else 1
    pixels = np.asarray(image, dtype=np.float64).reshape(H, W, C)[:, :, 0]
    gray = np.rint((np.clip(pixels, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    pathlib.Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(gray).save(path, format='PPM')
    return path


def pgm_write_batch(dir_out, points, image_shape, prefix='sample'):
    paths = []
    for idx, row in enumerate(np.asarray(points)):
        paths.append(pgm_write(os.path.join(dir_out, f'{prefix}_{idx:04d}{file_ext_pgm}'), row, image_shape))
    return paths


###############################################################################
###############################################################################
def gen_gmm2d(rng: np.random.Generator, n: int, **_):
    '''Draws from the asymmetric three-component 2D mixture.'''
    comp = rng.choice(len(list_gmm2d_weights), size=n, p=list_gmm2d_weights)
    means = np.asarray(list_gmm2d_means)[comp]
    stds = np.asarray(list_gmm2d_stds)[comp]
    points = means + stds[:, None] * rng.standard_normal((n, 2))
    return orc.EmpiricalDataset(points)


def glyph_draw(row_v: int, col_v: int, length_v: int, length_h: int, size: int = GLYPH_SIZE):
    '''
    One 'L' glyph: vertical bar in column col_v from row row_v downward, then a
    horizontal bar along its bottom row extending right. No quarter turn
    maps an L onto itself.
    '''
    img = np.full((size, size), GLYPH_BG)
    row_end = min(row_v + length_v, size)
    img[row_v:row_end, col_v] = GLYPH_FG
    img[row_end - 1, col_v:min(col_v + length_h, size)] = GLYPH_FG
    return img


def gen_glyphs(rng: np.random.Generator, n: int, size: int = GLYPH_SIZE, **_):
    '''8x8 procedural L-glyphs with randomized bar positions, values in [-1, 1].'''
    imgs = []
    for _idx in range(n):
        length_v = int(rng.integers(4, size - 1))
        length_h = int(rng.integers(3, size - 2))
        row_v = int(rng.integers(0, size - length_v + 1))
        col_v = int(rng.integers(0, size - length_h + 1))
        imgs.append(glyph_draw(row_v, col_v, length_v, length_h, size).reshape(-1))
    points = np.stack(imgs) if imgs else np.empty((0, size * size))
    return orc.EmpiricalDataset(points, image_shape=(size, size, 1))


def gen_gauss(rng: np.random.Generator, n: int, d: int = 2, mean: float = 0.0, std: float = 1.0, **_):
    '''Isotropic Gaussian draws; mostly useful as a smooth reference set.'''
    return orc.EmpiricalDataset(mean + std * rng.standard_normal((n, int(d))))


dict_generators = {
    gen_gmm2d_asym: gen_gmm2d,
    gen_glyphs8x8: gen_glyphs,
    gen_gaussian: gen_gauss,
}


def dataset_generate(name: str, n: int, seed: int, **params) -> orc.EmpiricalDataset:
    """
    Build a dataset from the generator registry.

    Example:
        ds = dataset_generate('gmm2d_asym', 8, seed=0)
    """
    func_name = inspect.stack()[0][3]
    dbh = '[{}]'.format(func_name)

    if name not in dict_generators:
        raise ValueError(f"Unknown dataset generator: {name!r} (known: {sorted(dict_generators)})")
    if n < 1:
        raise ValueError(f"Dataset size must be at least 1: {n!r}")
    rng = np.random.default_rng(seed)
    ds = dict_generators[name](rng, int(n), **params)
    print(dbh + f' {name} N={ds.N} d={ds.d} sigma_data={ds.sigma_data:.4f}')
    return ds


def dataset_split(ds: orc.EmpiricalDataset, n_heldout: int, sigma_data: float | None = None):
    '''
    Split off the last n_heldout points. sigma_data is re-estimated from the
    training part alone unless given; the held-out part carries the same value.
    '''
    if not 0 <= n_heldout < ds.N:
        raise ValueError(f"Held-out size {n_heldout} must be in [0, {ds.N})")
    n_train = ds.N - n_heldout
    train = orc.EmpiricalDataset(ds.points[:n_train], sigma_data=sigma_data, image_shape=ds.image_shape)
    if n_heldout == 0:
        return train, None
    heldout = orc.EmpiricalDataset(ds.points[n_train:], sigma_data=train.sigma_data, image_shape=ds.image_shape)
    return train, heldout
