import pathlib

import numpy as np
import pytest
from PIL import Image

import db_datasets as dbd
import oracle_mixture as orc
import sched_noise as sch


# --- text format -----------------------------------------------------------------

def test_round_trip_is_bit_identical(tmp_path):
    points = np.array([[0.1, 1.0 / 3.0], [-2.5e-300, np.pi], [1e16 + 2.0, -0.0]])
    path = dbd.samples_write(tmp_path / 'pts.txt', points)
    read, image_shape = dbd.samples_read(path)
    assert image_shape is None
    assert read.tobytes() == points.tobytes()


def test_header_layout(tmp_path):
    path = dbd.samples_write(tmp_path / 'img.txt', np.zeros((2, 4)), image_shape=(2, 2, 1))
    lines = path.read_text().splitlines()
    assert lines[0] == '4 2'
    assert lines[1] == '# image 2 2 1'
    assert len(lines) == 4


def test_empty_sample_file(tmp_path):
    path = dbd.samples_write(tmp_path / 'none.txt', np.empty((0, 3)))
    points, _shape = dbd.samples_read(path)
    assert points.shape == (0, 3)
    with pytest.raises(ValueError, match='at least one point'):
        dbd.dataset_read(path)


@pytest.mark.parametrize('text,match', [
    ('', 'empty'),
    ('two 2\n', "header must be 'd N'"),
    ('2 3\n1 2\n3 4\n', 'declares 3 rows'),
    ('2 1\n1 2 3\n', ':2: expected 2 values'),
    ('4 1\n# image 3 1 1\n1 2 3 4\n', ':2: image shape'),
])
def test_malformed_files(tmp_path, text, match):
    path = tmp_path / 'bad.txt'
    path.write_text(text)
    with pytest.raises(ValueError, match=match):
        dbd.samples_read(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        dbd.samples_read(tmp_path / 'absent.txt')


def test_dataset_read_keeps_image_shape(tmp_path):
    ds = dbd.dataset_generate(dbd.gen_glyphs8x8, 3, seed=1)
    loaded = dbd.dataset_read(dbd.dataset_write(tmp_path / 'glyphs.txt', ds))
    assert loaded.image_shape == (8, 8, 1)
    np.testing.assert_array_equal(loaded.points, ds.points)
    assert loaded.sigma_data == ds.sigma_data


# --- PGM output --------------------------------------------------------------------

def test_pgm_values(tmp_path):
    image = np.array([-1.0, 0.0, 1.0, 7.0, -3.0, 0.5])
    path = dbd.pgm_write(tmp_path / 'x.pgm', image, (2, 3, 1))
    assert path.read_bytes().startswith(b'P5')
    with Image.open(path) as img:
        assert img.size == (3, 2)
        pixels = np.asarray(img)
    np.testing.assert_array_equal(pixels, [[0, 128, 255], [255, 0, 191]])


def test_pgm_batch(tmp_path):
    paths = dbd.pgm_write_batch(tmp_path / 'out', np.zeros((3, 4)), (2, 2, 1))
    assert [pathlib.Path(p).name for p in paths] == [
        'sample_0000.pgm', 'sample_0001.pgm', 'sample_0002.pgm']


# --- generators ----------------------------------------------------------------------

def test_generators_are_seeded():
    for name in dbd.dict_generators:
        first = dbd.dataset_generate(name, 5, seed=3)
        second = dbd.dataset_generate(name, 5, seed=3)
        np.testing.assert_array_equal(first.points, second.points)


def test_gmm2d_has_no_quarter_turn_symmetry():
    ds = dbd.dataset_generate(dbd.gen_gmm2d_asym, 4000, seed=0)
    rotated = ds.points @ np.array([[0.0, 1.0], [-1.0, 0.0]])
    assert np.linalg.norm(rotated.mean(axis=0) - ds.points.mean(axis=0)) > 0.5


def test_glyph_values_and_asymmetry():
    ds = dbd.dataset_generate(dbd.gen_glyphs8x8, 10, seed=2)
    assert ds.d == 64
    assert set(np.unique(ds.points)) <= {dbd.GLYPH_BG, dbd.GLYPH_FG}
    for row in ds.points:
        img = row.reshape(8, 8)
        for turns in (1, 2, 3):
            assert not np.array_equal(np.rot90(img, turns), img)


def test_gaussian_dimension():
    ds = dbd.dataset_generate(dbd.gen_gaussian, 7, seed=0, d=5, std=0.1)
    assert (ds.N, ds.d) == (7, 5)
    assert ds.image_shape is None


@pytest.mark.parametrize('name,n', [('moons', 4), (dbd.gen_gaussian, 0)])
def test_generate_invalid(name, n):
    with pytest.raises(ValueError):
        dbd.dataset_generate(name, n, seed=0)


# --- split ----------------------------------------------------------------------------

def test_split_estimates_sigma_data_from_training_part():
    ds = dbd.dataset_generate(dbd.gen_gmm2d_asym, 10, seed=0)
    train, heldout = dbd.dataset_split(ds, 3)
    assert (train.N, heldout.N) == (7, 3)
    assert train.sigma_data == sch.sigma_data_estimate(ds.points[:7])
    assert heldout.sigma_data == train.sigma_data
    np.testing.assert_array_equal(np.vstack([train.points, heldout.points]), ds.points)


def test_split_keeps_explicit_sigma_data():
    ds = dbd.dataset_generate(dbd.gen_gmm2d_asym, 10, seed=0)
    train, heldout = dbd.dataset_split(ds, 3, sigma_data=0.25)
    assert train.sigma_data == heldout.sigma_data == 0.25


def test_split_without_heldout(ds_2d):
    train, heldout = dbd.dataset_split(ds_2d, 0)
    assert heldout is None
    assert isinstance(train, orc.EmpiricalDataset) and train.N == ds_2d.N


@pytest.mark.parametrize('n_heldout', [-1, 4])
def test_split_invalid(ds_2d, n_heldout):
    with pytest.raises(ValueError):
        dbd.dataset_split(ds_2d, n_heldout)
