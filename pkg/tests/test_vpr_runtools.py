import json
import shutil

import pytest

import vpr_runtools as vpr


# --- run_dir_prepare ------------------------------------------------------------------

def test_prepare_creates_directory(tmp_path):
    path = vpr.run_dir_prepare(tmp_path / 'a' / 'b')
    assert path.is_dir()


def test_prepare_accepts_unrelated_files(tmp_path):
    (tmp_path / 'notes.txt').write_text('keep me')
    vpr.run_dir_prepare(tmp_path)
    assert (tmp_path / 'notes.txt').read_text() == 'keep me'


def test_prepare_refuses_previous_run(tmp_path):
    (tmp_path / vpr.file_run_info).write_text('{}')
    with pytest.raises(vpr.RunDirConflictError, match='--force'):
        vpr.run_dir_prepare(tmp_path)
    assert (tmp_path / vpr.file_run_info).exists()


def test_prepare_force_clears_previous_run(tmp_path):
    run = tmp_path / 'run'
    run.mkdir()
    for name in vpr.list_run_outputs:
        (run / name).write_text('stale')
    vpr.run_dir_prepare(run, force=True)
    assert run.is_dir()
    assert list(run.iterdir()) == []


def test_prepare_force_keeps_unrelated_files(tmp_path):
    (tmp_path / 'notes.txt').write_text('keep me')
    (tmp_path / 'data').mkdir()
    (tmp_path / 'data' / 'pts.txt').write_text('2 0\n')
    (tmp_path / vpr.file_metrics).write_text('step\n0\n')
    (tmp_path / vpr.file_ckpt_last).write_bytes(b'x')
    vpr.run_dir_prepare(tmp_path, force=True)
    assert (tmp_path / 'notes.txt').read_text() == 'keep me'
    assert (tmp_path / 'data' / 'pts.txt').is_file()
    assert not (tmp_path / vpr.file_metrics).exists()
    assert not (tmp_path / vpr.file_ckpt_last).exists()


def test_prepare_rejects_file(tmp_path):
    target = tmp_path / 'file'
    target.write_text('')
    with pytest.raises(vpr.RunDirConflictError):
        vpr.run_dir_prepare(target, force=True)


# --- run_info ----------------------------------------------------------------------------

def test_run_info_round_trip(tmp_path):
    vpr.run_info_write(tmp_path, path_repo=tmp_path, path_json=tmp_path / 'absent.json', variant='edm', seed=3)
    info = vpr.run_info_read(tmp_path)
    assert (info['variant'], info['seed']) == ('edm', 3)
    assert 'created' in info and info['git'] is None


def test_run_info_git_from_exported_tree(tmp_path):
    export = tmp_path / 'export'
    export.mkdir()
    path_json = export / 'repo_info.json'
    payload = {'hash': 'abc1234', 'date': '2026-01-01 10:30:00', 'message': 'msg', 'dirty': False}
    path_json.write_text(json.dumps(payload))
    run = tmp_path / 'run'
    run.mkdir()
    vpr.run_info_write(run, path_repo=export, path_json=path_json, variant='edm')
    assert vpr.run_info_read(run)['git'] == payload


def test_run_info_git_cached_from_repository(tmp_path):
    git = pytest.importorskip('git')
    if shutil.which('git') is None:
        pytest.skip('git executable not available')
    repo_dir = tmp_path / 'repo'
    repo = git.Repo.init(repo_dir)
    (repo_dir / 'a.txt').write_text('a')
    repo.index.add(['a.txt'])
    actor = git.Actor('runner', 'runner@example.com')
    commit = repo.index.commit('first commit', author=actor, committer=actor)
    path_json = tmp_path / 'cache' / 'repo_info.json'
    run = tmp_path / 'run'
    run.mkdir()

    vpr.run_info_write(run, path_repo=repo_dir, path_json=path_json)
    info_git = vpr.run_info_read(run)['git']
    assert info_git['hash'] == commit.hexsha[:7]
    assert info_git['message'] == 'first commit'
    assert json.loads(path_json.read_text()) == info_git


def test_run_info_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match='Not a run directory'):
        vpr.run_info_read(tmp_path)


def test_run_dirs_find(tmp_path):
    for name in ('b', 'a'):
        (tmp_path / 'runs' / name).mkdir(parents=True)
        (tmp_path / 'runs' / name / vpr.file_run_info).write_text('{}')
    (tmp_path / 'runs' / 'other').mkdir()
    found = vpr.run_dirs_find([tmp_path / 'runs', tmp_path / 'runs' / 'a', tmp_path / 'missing'])
    assert [p.name for p in found] == ['a', 'b', 'a']


# --- git provenance ------------------------------------------------------------------------

def test_git_info_falls_back_to_json(tmp_path):
    path_json = tmp_path / 'git_info.json'
    payload = {'hash': 'abc1234', 'date': '2026-01-01 10:30:00', 'message': 'msg', 'dirty': False}
    path_json.write_text(json.dumps(payload))
    # tmp_path is not inside a repository
    assert vpr.git_get_info(tmp_path, str(path_json)) == payload


def test_git_info_none_without_sources(tmp_path):
    assert vpr.git_get_info(tmp_path, str(tmp_path / 'absent.json')) is None


def test_git_info_bad_json(tmp_path):
    path_json = tmp_path / 'git_info.json'
    path_json.write_text('{not json')
    assert vpr.git_get_info(tmp_path, str(path_json)) is None


def test_find_repo_root(tmp_path):
    (tmp_path / '.git').mkdir()
    (tmp_path / 'src' / 'deep').mkdir(parents=True)
    assert vpr._find_repo_root(str(tmp_path / 'src' / 'deep')) == str(tmp_path)
