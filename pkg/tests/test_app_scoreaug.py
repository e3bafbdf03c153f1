import csv
import dataclasses
import json

import numpy as np
import pytest

import app_scoreaug as app
import cfg_run as cfg
import db_datasets as dbd
import db_runs as dbr
import net_denoiser as net
import sched_noise as sch
import train_scoreaug as trn
import vpr_runtools as vpr


def train(path, *extra):
    return app.main(['train', '--config', str(path), '--no-progress', *extra])


# --- argument parsing -------------------------------------------------------------------

def test_command_required():
    with pytest.raises(SystemExit) as exc:
        app.parse_args([])
    assert exc.value.code == 2


def test_train_flags():
    args = app.parse_args(['train', '--variant', 'edm', '--seed', '4', '--conditioning', 'on', '--force'])
    assert (args.variant, args.seed, args.conditioning, args.force) == ('edm', 4, 'on', True)
    assert args.config == 'default'


def test_unknown_variant_rejected():
    with pytest.raises(SystemExit):
        app.parse_args(['train', '--variant', 'mixup'])


# --- verify -------------------------------------------------------------------------------

def test_verify_divergence_group(tmp_path):
    out = tmp_path / 'verify.csv'
    assert app.main(['verify', '--filter', 'divergence', '--out', str(out)]) == app.EXIT_OK
    with open(out, newline='') as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert {row['status'] for row in rows} == {'pass'}


def test_verify_rank_deficient_map_fails(write_config, tmp_path):
    path = write_config('[verify]\nlinear_map = 1 2; 2 4\n')
    code = app.main(['verify', '--config', str(path), '--filter', 'lin_custom', '--out', str(tmp_path / 'v.csv')])
    assert code == app.EXIT_CHECKS_FAILED
    with open(tmp_path / 'v.csv', newline='') as fh:
        assert [row['status'] for row in csv.DictReader(fh)] == ['precondition_failed']


def test_verify_filter_without_match(tmp_path):
    with pytest.raises(SystemExit) as exc:
        app.main(['verify', '--filter', 'nothing_here', '--out', str(tmp_path / 'v.csv')])
    assert exc.value.code == app.EXIT_USAGE


def test_verify_bad_config(write_config, capsys):
    path = write_config('[verify]\nn_mc = lots\n')
    with pytest.raises(SystemExit) as exc:
        app.main(['verify', '--config', str(path)])
    assert exc.value.code == app.EXIT_USAGE
    assert f'{path}:2:' in capsys.readouterr().out


# --- datasets --------------------------------------------------------------------------------

def test_run_datasets_sigma_data_from_training_points():
    run_cfg = cfg.config_load('default', use_env=False)
    train_ds, heldout_ds = app.run_datasets(run_cfg)
    assert heldout_ds is not None
    assert train_ds.sigma_data == sch.sigma_data_estimate(train_ds.points)
    assert heldout_ds.sigma_data == train_ds.sigma_data


def test_run_datasets_explicit_sigma_data():
    run_cfg = cfg.config_load('default', use_env=False)
    run_cfg = dataclasses.replace(run_cfg, dataset=dataclasses.replace(run_cfg.dataset, sigma_data=0.4))
    train_ds, heldout_ds = app.run_datasets(run_cfg)
    assert train_ds.sigma_data == heldout_ds.sigma_data == 0.4


# --- train ---------------------------------------------------------------------------------

def test_train_writes_run_directory(tiny_run_config):
    path, out_dir = tiny_run_config()
    assert train(path) == app.EXIT_OK
    for name in (vpr.file_config_snapshot, vpr.file_run_info, vpr.file_report, trn.file_metrics,
                 trn.file_ckpt_last, trn.file_ckpt_final):
        assert (out_dir / name).is_file(), name
    info = vpr.run_info_read(out_dir)
    assert (info['variant'], info['n_train'], info['n_heldout'], info['seed']) == ('scoreaug', 6, 4, 3)
    assert info['image_shape'] is None
    assert [row['step'] for row in trn.metrics_read(out_dir / trn.file_metrics)] == [0, 2, 4]
    assert 'variant       scoreaug' in (out_dir / vpr.file_report).read_text()


def test_config_snapshot_reproduces_config(tiny_run_config):
    path, out_dir = tiny_run_config()
    train(path)
    snapshot = cfg.config_load(out_dir / vpr.file_config_snapshot, use_env=False)
    assert snapshot == cfg.config_load(path, use_env=False)


def test_train_is_deterministic(tiny_run_config, tmp_path):
    path, _out_dir = tiny_run_config()
    for name in ('a', 'b'):
        train(path, '--out-dir', str(tmp_path / name))
    assert ((tmp_path / 'a' / trn.file_metrics).read_bytes()
            == (tmp_path / 'b' / trn.file_metrics).read_bytes())


def test_train_flags_override(tiny_run_config, tmp_path):
    path, _out_dir = tiny_run_config()
    out_dir = tmp_path / 'override'
    train(path, '--out-dir', str(out_dir), '--seed', '8', '--variant', 'edm', '--n-train', '5',
          '--width', '6', '--steps', '2')
    info = vpr.run_info_read(out_dir)
    assert (info['seed'], info['variant'], info['n_train'], info['width']) == (8, 'edm', 5, 6)
    snapshot = cfg.config_load(out_dir / vpr.file_config_snapshot, use_env=False)
    assert (snapshot.seed, snapshot.train.steps, snapshot.model.width) == (8, 2, 6)
    assert net.checkpoint_load(out_dir / trn.file_ckpt_final).cfg.hidden == (6, 6)


def test_env_seed_reaches_run(tiny_run_config, monkeypatch):
    path, out_dir = tiny_run_config()
    monkeypatch.setenv(cfg.env_seed, '21')
    train(path)
    assert vpr.run_info_read(out_dir)['seed'] == 21


def test_train_refuses_existing_run(tiny_run_config):
    path, out_dir = tiny_run_config()
    train(path)
    with pytest.raises(SystemExit) as exc:
        train(path)
    assert exc.value.code == app.EXIT_USAGE
    assert train(path, '--force') == app.EXIT_OK


def test_train_bad_override(tiny_run_config):
    path, _out_dir = tiny_run_config()
    with pytest.raises(SystemExit) as exc:
        train(path, '--steps', '-3')
    assert exc.value.code == app.EXIT_USAGE


# --- sample ---------------------------------------------------------------------------------

def test_sample_from_run_directory(tiny_run_config):
    path, out_dir = tiny_run_config()
    train(path)
    assert app.main(['sample', '--checkpoint', str(out_dir)]) == app.EXIT_OK
    points, image_shape = dbd.samples_read(out_dir / 'samples' / 'samples.txt')
    assert points.shape == (5, 2)
    assert image_shape is None
    assert np.all(np.isfinite(points))


def test_sample_is_seeded(tiny_run_config, tmp_path):
    path, out_dir = tiny_run_config()
    train(path)
    for name in ('a', 'b'):
        app.main(['sample', '--checkpoint', str(out_dir / trn.file_ckpt_final), '--seed', '5',
                  '--count', '3', '--n-steps', '6', '--out-dir', str(tmp_path / name)])
    assert (tmp_path / 'a' / 'samples.txt').read_bytes() == (tmp_path / 'b' / 'samples.txt').read_bytes()


def test_sample_condition_needs_conditioned_model(tiny_run_config):
    path, out_dir = tiny_run_config()
    train(path)
    with pytest.raises(SystemExit) as exc:
        app.main(['sample', '--checkpoint', str(out_dir), '--condition', 'rotation:2'])
    assert exc.value.code == app.EXIT_USAGE


def test_conditioned_sampling_layout(tiny_run_config):
    path, out_dir = tiny_run_config()
    assert train(path, '--conditioning', 'on') == app.EXIT_OK
    assert net.checkpoint_load(out_dir / trn.file_ckpt_final).cfg.cond_dim > 0

    assert app.main(['sample', '--checkpoint', str(out_dir), '--condition', 'rotation:2']) == app.EXIT_OK
    points, _shape = dbd.samples_read(out_dir / 'samples' / 'samples_rotation_2.txt')
    assert points.shape == (5, 2)

    assert app.main(['sample', '--checkpoint', str(out_dir), '--rotation-sweep', '--count', '2']) == app.EXIT_OK
    for omega_r in range(4):
        assert (out_dir / 'samples' / f'samples_rot{omega_r}.txt').is_file()


def test_sample_missing_checkpoint(tmp_path):
    with pytest.raises(SystemExit) as exc:
        app.main(['sample', '--checkpoint', str(tmp_path / 'nowhere')])
    assert exc.value.code == app.EXIT_USAGE


def test_sample_bad_condition(tiny_run_config):
    path, out_dir = tiny_run_config()
    train(path, '--conditioning', 'on')
    with pytest.raises(SystemExit):
        app.main(['sample', '--checkpoint', str(out_dir), '--condition', 'shear:2'])


# --- report ---------------------------------------------------------------------------------

def test_report_over_variants(tiny_run_config, tmp_path, capsys):
    for variant in ('edm', 'scoreaug'):
        path, _out_dir = tiny_run_config(variant=variant, name=f'{variant}.ini')
        train(path)
    assert app.main(['report', str(tmp_path)]) == app.EXIT_OK
    rows = dbr.tsv_read(tmp_path / 'report' / dbr.file_report_compare)
    assert [row['variant'] for row in rows] == ['edm', 'scoreaug']
    assert all(row['n_seeds'] == '1' and row['n_train'] == '6' for row in rows)
    printed = capsys.readouterr().out.splitlines()
    assert '\t'.join(dbr.list_compare_columns) in printed
    assert sum(line.startswith(('edm\t', 'scoreaug\t')) for line in printed) == 2


def test_report_without_runs(tmp_path):
    with pytest.raises(SystemExit) as exc:
        app.main(['report', str(tmp_path)])
    assert exc.value.code == app.EXIT_USAGE


# --- gen-data -------------------------------------------------------------------------------

def test_gen_data_glyphs(tmp_path):
    out = tmp_path / 'data' / 'glyphs.txt'
    assert app.main(['gen-data', '--generator', 'glyphs8x8', '--n', '3', '--seed', '2', '--out', str(out),
                     '--pgm']) == app.EXIT_OK
    points, image_shape = dbd.samples_read(out)
    assert points.shape == (3, 64) and image_shape == (8, 8, 1)
    assert len(list((tmp_path / 'data' / 'glyphs').glob('*.pgm'))) == 3


def test_gen_data_feeds_a_run(tmp_path, write_config):
    app.main(['gen-data', '--generator', 'gaussian', '--n', '6', '--d', '3', '--out', str(tmp_path / 'pts.txt')])
    text = ('[run]\nout_dir = {}\n\n[dataset]\npath = pts.txt\n\n[model]\nwidth = 4\ndepth = 1\n'
            'noise_embed_dim = 4\n\n[train]\nvariant = edm\nsteps = 2\nbatch_size = 4\neval_every = 1\n'
            'n_eval = 4\neval_samples = 2\n\n[sampler]\nn_steps = 3\n').format(tmp_path / 'run')
    assert train(write_config(text)) == app.EXIT_OK
    info = json.loads((tmp_path / 'run' / vpr.file_run_info).read_text())
    assert (info['n_train'], info['d']) == (6, 3)
