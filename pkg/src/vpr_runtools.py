import os, inspect, json, pathlib, datetime

try:
    import git
    GIT_AVAILABLE = True
except ImportError:
    GIT_AVAILABLE = False


file_run_info = 'run_info.json'
file_config_snapshot = 'config.ini'
file_report = 'report.txt'
file_metrics = 'metrics.csv'
file_ckpt_last = 'checkpoint_last.bin'
file_ckpt_final = 'checkpoint_final.bin'

# commit info cached beside the sources, for trees exported without .git
path_repo_info = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'repo_info.json')

# files whose presence marks a directory as holding a previous run
list_run_markers = [file_run_info, file_config_snapshot, file_metrics, file_ckpt_final]

# everything a run writes at the top of its directory; --force removes only these
list_run_outputs = list_run_markers + [file_report, file_ckpt_last, file_ckpt_last + '.tmp', file_ckpt_final + '.tmp']


class RunDirConflictError(FileExistsError):
    '''Output directory already holds a run and force was not given.'''


def _find_repo_root(start_path):
    """Return the nearest parent directory containing a .git entry."""
    current = os.path.abspath(start_path or os.getcwd())
    if os.path.isfile(current):
        current = os.path.dirname(current)

    while True:
        if os.path.exists(os.path.join(current, '.git')):
            return current
        parent = os.path.dirname(current)
        if parent == current:
            return None
        current = parent


def _read_git_info_json(path_json):
    """Read commit info from JSON metadata file."""
    if path_json and os.path.exists(path_json):
        try:
            with open(path_json, 'r') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            print(f"Error reading git info from {path_json}: {e}")
    return None

###############################################################################
###############################################################################
def git_get_info(path_repo=None, path_json=None):
    """
    Latest commit of the repository holding path_repo (default: this source tree).
    Falls back to reading path_json when GitPython or the repository is unavailable.

    Returns:
        dict: {'hash': 'abc1234', 'date': '2026-01-01 10:30:00', 'message': '...', 'dirty': False}
        None if neither git nor the JSON file is available
    """
    repo_root = _find_repo_root(path_repo or os.path.dirname(os.path.abspath(__file__)))

    if GIT_AVAILABLE and repo_root:
        try:
            repo = git.Repo(repo_root, search_parent_directories=False)
            latest_commit = repo.head.commit
            commit_info = {
                'hash': latest_commit.hexsha[:7],
                'date': datetime.datetime.fromtimestamp(latest_commit.committed_date).strftime('%Y-%m-%d %H:%M:%S'),
                'message': latest_commit.message.strip().split('\n')[0],
                'dirty': bool(repo.is_dirty()),
            }
            if path_json:
                try:
                    os.makedirs(os.path.dirname(os.path.abspath(path_json)), exist_ok=True)
                    with open(path_json, 'w') as f:
                        json.dump(commit_info, f, indent=2)
                except OSError as e:
                    print(f"Warning: Could not write git info to {path_json}: {e}")
            return commit_info
        except (git.InvalidGitRepositoryError, git.GitCommandError, ValueError) as e:
            # ValueError: repository without any commit yet
            print(f"Git error: {e}")

    return _read_git_info_json(path_json)

# end of def git_get_info(path_repo=None, path_json=None):

###############################################################################
###############################################################################
def run_dir_prepare(path_run, force: bool = False) -> pathlib.Path:
    """
    Create the run directory, refusing to reuse one that already holds a run.

    With force, the files a previous run wrote (list_run_outputs) are removed
    first so stale metrics or checkpoints never mix with the new ones. Anything
    else in the directory is left alone.

    Raises:
        RunDirConflictError: directory holds a previous run and force is False.
    """
    func_name = inspect.stack()[0][3]
    dbh = '[{}]'.format(func_name)

    path_run = pathlib.Path(path_run)
    if path_run.is_file():
        raise RunDirConflictError(f"Run directory path is a file: {path_run}")
    existing = [name for name in list_run_markers if (path_run / name).exists()]
    if existing:
        if not force:
            raise RunDirConflictError(f"Run directory already holds a run ({', '.join(existing)}): {path_run} "
                                      "(use --force to overwrite)")
        print(dbh + f' overwriting previous run in {path_run}')
        for name in list_run_outputs:
            target = path_run / name
            if target.is_file() or target.is_symlink():
                target.unlink()
    path_run.mkdir(parents=True, exist_ok=True)
    return path_run


def run_info_write(path_run, path_repo=None, path_json=None, **fields) -> pathlib.Path:
    '''
    run_info.json: caller fields plus creation time and git provenance.
    path_json defaults to path_repo_info, refreshed from git when the source
    tree is a repository and read back when it is not (exported trees).
    '''
    info = dict(fields)
    info['created'] = datetime.datetime.now().strftime('%Y-%m-%d %H:%M:%S')
    info['git'] = git_get_info(path_repo, path_json if path_json is not None else path_repo_info)
    path = pathlib.Path(path_run) / file_run_info
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(info, f, indent=2, sort_keys=True)
    return path


def run_info_read(path_run) -> dict:
    path = pathlib.Path(path_run) / file_run_info
    if not path.is_file():
        raise FileNotFoundError(f"Not a run directory (no {file_run_info}): {path_run}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def run_dirs_find(list_paths) -> list[pathlib.Path]:
    '''Run directories among list_paths, searching one level down in non-run directories.'''
    found = []
    for item in list_paths:
        item = pathlib.Path(item)
        if (item / file_run_info).is_file():
            found.append(item)
        elif item.is_dir():
            found.extend(sorted(p for p in item.iterdir() if (p / file_run_info).is_file()))
    return found
