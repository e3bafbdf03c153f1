
import os, inspect, csv, pathlib, hashlib
import sqlite3

import numpy as np

import train_scoreaug as trn
import vpr_runtools as vpr

file_runs_db = 'runs.sqlite'
file_report_compare = 'report_compare.tsv'
file_report_curves = 'report_curves.tsv'

table_runs = 'runs'
table_metrics = 'metrics'

list_db_runs_columns = ['run_id',
                        'run_path',
                        'variant',
                        'conditioning',
                        'n_train',
                        'width',
                        'seed',
                        'steps',
                        'train_loss',
                        'heldout_loss',
                        'gap',
                        'oracle_loss_floor',
                        'nn_median']

# grouping axes of the comparison table
list_compare_keys = ['variant', 'conditioning', 'n_train', 'width']
list_compare_values = ['train_loss', 'heldout_loss', 'gap', 'oracle_loss_floor', 'nn_median']
list_compare_columns = list_compare_keys + ['n_seeds'] + list_compare_values

list_curves_values = ['train_loss', 'heldout_loss', 'gap', 'oracle_loss_floor', 'nn_median']
list_curves_columns = list_compare_keys + ['step', 'n_seeds'] + list_curves_values


class Median:
    '''sqlite aggregate: median of the non-null values in a group.'''

    def __init__(self):
        self.values = []

    def step(self, value):
        if value is not None:
            self.values.append(float(value))

    def finalize(self):
        return float(np.median(self.values)) if self.values else None


###############################################################################
###############################################################################
def db_sqlite_tables_create(db_path):
    '''
    open (or create) the run index and make sure both tables exist
    '''
    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    conn.create_aggregate('median', 1, Median)
    cursor = conn.cursor()

    cursor.execute(f'''
        CREATE TABLE IF NOT EXISTS {table_runs} (
            id INTEGER PRIMARY KEY,
            run_id TEXT NOT NULL UNIQUE,
            run_path TEXT NOT NULL,
            variant TEXT NOT NULL,
            conditioning INTEGER NOT NULL,
            n_train INTEGER NOT NULL,
            width INTEGER NOT NULL,
            seed INTEGER NOT NULL,
            steps INTEGER NOT NULL,
            train_loss REAL,
            heldout_loss REAL,
            gap REAL,
            oracle_loss_floor REAL,
            nn_median REAL
        )
    ''')
    cursor.execute(f'''
        CREATE TABLE IF NOT EXISTS {table_metrics} (
            id INTEGER PRIMARY KEY,
            run_id TEXT NOT NULL,
            step INTEGER NOT NULL,
            train_loss REAL,
            heldout_loss REAL,
            gap REAL,
            oracle_loss_floor REAL,
            nn_median REAL,
            UNIQUE(run_id, step)
        )
    ''')
    conn.commit()
    return conn

# end of def db_sqlite_tables_create(db_path):


def db_run_dict(path_run) -> tuple[dict, list]:
    """
    Row for the runs table plus the metrics rows of one run directory.

    Raises:
        FileNotFoundError: no run_info.json or metrics.csv.
        ValueError: run_info.json lacks a required field or metrics.csv is empty.
    """
    path_run = pathlib.Path(path_run)
    info = vpr.run_info_read(path_run)
    path_metrics = path_run / trn.file_metrics
    if not path_metrics.is_file():
        raise FileNotFoundError(f"Run has no {trn.file_metrics}: {path_run}")
    metrics = trn.metrics_read(path_metrics)
    if not metrics:
        raise ValueError(f"Empty metrics file: {path_metrics}")
    for key in ('variant', 'conditioning', 'n_train', 'width', 'seed'):
        if key not in info:
            raise ValueError(f"{vpr.file_run_info} in {path_run} lacks {key!r}")

    last = metrics[-1]
    run_path = str(path_run.resolve())
    row = {'run_id': path_run.name + '_' + hashlib.sha1(run_path.encode('utf-8')).hexdigest()[:8],
           'run_path': run_path,
           'variant': info['variant'],
           'conditioning': int(bool(info['conditioning'])),
           'n_train': int(info['n_train']),
           'width': int(info['width']),
           'seed': int(info['seed']),
           'steps': int(last['step']),
           'train_loss': last['train_loss'],
           'heldout_loss': last['heldout_loss'],
           'gap': last['gap'],
           'oracle_loss_floor': last['oracle_loss_floor'],
           'nn_median': last['nn_median']}
    return row, metrics


def db_runs_index(conn, list_run_dirs) -> dict:
    """
    Insert (or replace) every run directory into the index.

    A directory that cannot be read is recorded in stats['errors'] and skipped.

    Returns:
        dict: {'indexed': int, 'errors': [(path, reason), ...]}
    """
    func_name = inspect.stack()[0][3]
    dbh = '[{}]'.format(func_name)

    stats = {'indexed': 0, 'errors': []}
    cursor = conn.cursor()
    for path_run in list_run_dirs:
        try:
            row, metrics = db_run_dict(path_run)
        except (OSError, ValueError, KeyError) as e:
            stats['errors'].append((str(path_run), str(e)))
            print(dbh + f' skipping {path_run}: {e}')
            continue
        # run_id is derived from the resolved path, so re-indexing replaces
        cursor.execute(f"DELETE FROM {table_metrics} WHERE run_id = ?", (row['run_id'],))
        placeholders = ', '.join('?' for _ in list_db_runs_columns)
        cursor.execute(f"INSERT OR REPLACE INTO {table_runs} ({', '.join(list_db_runs_columns)}) "
                       f"VALUES ({placeholders})", [row[col] for col in list_db_runs_columns])
        cursor.executemany(
            f"INSERT INTO {table_metrics} (run_id, step, train_loss, heldout_loss, gap, oracle_loss_floor, nn_median) "
            f"VALUES (?, ?, ?, ?, ?, ?, ?)",
            [(row['run_id'], m['step'], m['train_loss'], m['heldout_loss'], m['gap'], m['oracle_loss_floor'],
              m['nn_median']) for m in metrics])
        stats['indexed'] += 1
    conn.commit()
    print(dbh + f' {stats["indexed"]} runs indexed, {len(stats["errors"])} skipped')
    return stats

# end of def db_runs_index(conn, list_run_dirs):


def db_runs_compare(conn) -> list[dict]:
    '''One row per (variant, conditioning, n_train, width): seed count and medians over seeds.'''
    keys = ', '.join(list_compare_keys)
    medians = ', '.join(f'median({col}) AS {col}' for col in list_compare_values)
    cursor = conn.execute(f"SELECT {keys}, COUNT(*) AS n_seeds, {medians} FROM {table_runs} "
                          f"GROUP BY {keys} ORDER BY {keys}")
    return [dict(row) for row in cursor.fetchall()]


def db_runs_curves(conn) -> list[dict]:
    '''Per group and step, medians over seeds of the metrics curves.'''
    keys = ', '.join(f'r.{col}' for col in list_compare_keys)
    medians = ', '.join(f'median(m.{col}) AS {col}' for col in list_curves_values)
    cursor = conn.execute(f"SELECT {keys}, m.step AS step, COUNT(*) AS n_seeds, {medians} "
                          f"FROM {table_metrics} m JOIN {table_runs} r ON m.run_id = r.run_id "
                          f"GROUP BY {keys}, m.step ORDER BY {keys}, m.step")
    return [dict(row) for row in cursor.fetchall()]


def fmt_cell(value):
    if isinstance(value, float):
        return '%.17g' % value
    return '' if value is None else str(value)


def tsv_write(path, columns, rows):
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, delimiter='\t', lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt_cell(row[col]) for col in columns])
    return path


def tsv_read(path) -> list[dict]:
    with open(path, newline='', encoding='utf-8') as fh:
        return list(csv.DictReader(fh, delimiter='\t'))

###############################################################################
###############################################################################
def report_build(list_paths, dir_out) -> dict:
    """
    Index run directories into runs.sqlite under dir_out and emit the
    comparison and curve tables.

    Example:
        report_build(['runs/'], 'runs/report')

    Returns:
        dict: {'compare': rows, 'curves': rows, 'stats': index stats, 'paths': {...}}
    """
    func_name = inspect.stack()[0][3]
    dbh = '[{}]'.format(func_name)

    dir_out = pathlib.Path(dir_out)
    dir_out.mkdir(parents=True, exist_ok=True)
    list_run_dirs = vpr.run_dirs_find(list_paths)
    if not list_run_dirs:
        raise FileNotFoundError(f"No run directories found in: {', '.join(str(p) for p in list_paths)}")

    conn = db_sqlite_tables_create(os.path.join(dir_out, file_runs_db))
    try:
        stats = db_runs_index(conn, list_run_dirs)
        compare = db_runs_compare(conn)
        curves = db_runs_curves(conn)
    finally:
        conn.close()

    paths = {'compare': tsv_write(dir_out / file_report_compare, list_compare_columns, compare),
             'curves': tsv_write(dir_out / file_report_curves, list_curves_columns, curves)}
    print(dbh + f' {len(compare)} comparison rows -> {paths["compare"]}')
    return {'compare': compare, 'curves': curves, 'stats': stats, 'paths': paths}

# end of def report_build(list_paths, dir_out):


def run_report_text(info: dict, metrics: list[dict]) -> str:
    '''Human-readable summary written as report.txt at the end of a run.'''
    lines = [f"variant       {info.get('variant')}",
             f"conditioning  {info.get('conditioning')}",
             f"n_train       {info.get('n_train')}",
             f"width         {info.get('width')}",
             f"seed          {info.get('seed')}"]
    if metrics:
        last = metrics[-1]
        lines += [f"steps         {last['step']}",
                  f"train_loss    {last['train_loss']:.6g}",
                  f"heldout_loss  {last['heldout_loss']:.6g}",
                  f"gap           {last['gap']:.6g}",
                  f"oracle_floor  {last['oracle_loss_floor']:.6g}",
                  f"nn_median     {last['nn_median']:.6g}"]
    git_info = info.get('git')
    if git_info:
        lines.append(f"commit        {git_info.get('hash')} {git_info.get('date')}")
    return '\n'.join(lines) + '\n'
