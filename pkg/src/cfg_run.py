"""
Run Configuration
=================
INI run configs: a fixed schema per section, typed parsing with file:line
diagnostics, the SCOREAUG_SEED override, and the snapshot writer used for
every run directory.

Sections: [run] [dataset] [schedule] [augmentation] [model] [train] [sampler] [verify]
Bundled configs live in resources/ and can be named without their path
(e.g. '2d' or 'scoreaug_2d' -> resources/scoreaug_2d.ini).
"""

import configparser
import dataclasses
import os, pathlib, re
from dataclasses import dataclass, field

import aug_transforms as aug
import net_denoiser as net
import sampler_heun as smp
import sched_noise as sch
import thm_verify as thm
import train_scoreaug as trn


env_seed = 'SCOREAUG_SEED'
path_resources = pathlib.Path(__file__).resolve().parent / 'resources'
config_prefix = 'scoreaug_'


class ConfigError(ValueError):
    '''Invalid config file; message starts with path:line when a line is known.'''

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = f'{path}:{line}: ' if path is not None and line is not None else (f'{path}: ' if path else '')
        super().__init__(where + message)


# ============================================================================
# SCHEMA
# ============================================================================

def _to_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _to_list(text: str) -> tuple:
    return tuple(tok.strip() for tok in text.split(',') if tok.strip())


def _to_matrix(text: str):
    if text.strip().lower() in ('', 'none'):
        return None
    rows = tuple(tuple(float(v) for v in row.split()) for row in text.split(';') if row.strip())
    if len({len(row) for row in rows}) != 1:
        raise ValueError(f"matrix rows differ in length: {text!r}")
    return rows


def _to_optional_float(text: str):
    return None if text.strip().lower() in ('', 'auto', 'none') else float(text)


def _to_optional_str(text: str):
    return None if text.strip().lower() in ('', 'none') else text.strip()


dict_schema = {
    'run': {'seed': int, 'out_dir': str},
    'dataset': {'generator': _to_optional_str, 'path': _to_optional_str, 'n': int, 'n_heldout': int, 'seed': int,
                'd': int, 'std': float, 'sigma_data': _to_optional_float},
    'schedule': {'formulation': str, 'sigma_data': _to_optional_float, 't_min': float,
                 'vp_beta_d': float, 'vp_beta_min': float},
    'augmentation': {'preset': _to_optional_str, 'kinds': _to_list, 'B': float, 'R_t': float, 'R_c': float,
                     'a_max': float, **{f'enable_{kind}': _to_bool for kind in aug.list_aug_kinds}},
    'model': {'width': int, 'depth': int, 'noise_embed_dim': int, 'dropout': float},
    'train': {'variant': str, 'conditioning': _to_bool, 'batch_size': int, 'steps': int,
              'learning_rate': float, 'ema_halflife': float, 'heldout_fraction': float,
              'eval_every': int, 'n_eval': int, 'eval_samples': int, 'weight_decay': float},
    'sampler': {'n_steps': int, 'sigma_max': float, 'sigma_min': float, 'rho': float,
                'condition': _to_optional_str, 'null_condition': str, 'count': int},
    'verify': {'sigma': float, 'n_mc': int, 'grid_resolution': int, 'linear_map': _to_matrix},
}


# ============================================================================
# TYPED CONFIG
# ============================================================================

@dataclass
class DatasetConfig:
    '''
    A registered generator (name, n, seed, options) or a dataset file path.

    n_heldout: extra generator draws kept out of training; when 0, train
        heldout_fraction splits the training set instead.
    '''
    generator: str | None = 'gmm2d_asym'
    path: str | None = None
    n: int = 8
    n_heldout: int = 0
    seed: int = 0
    d: int = 2
    std: float = 1.0
    sigma_data: float | None = None


@dataclass
class ScheduleConfig:
    formulation: str = sch.formulation_ve
    sigma_data: float | None = None
    t_min: float = sch.T_MIN
    vp_beta_d: float = sch.VP_BETA_D
    vp_beta_min: float = sch.VP_BETA_MIN

    def build(self, sigma_data_dataset: float) -> sch.DiffusionSchedule:
        sigma_data = self.sigma_data if self.sigma_data is not None else sigma_data_dataset
        return sch.DiffusionSchedule(formulation=self.formulation, sigma_data=sigma_data, t_min=self.t_min,
                                     vp_beta_d=self.vp_beta_d, vp_beta_min=self.vp_beta_min)


@dataclass
class ModelConfig:
    width: int = 256
    depth: int = 3
    noise_embed_dim: int = 32
    dropout: float = 0.0

    def net_config(self, d: int, cond_dim: int, sigma_data: float) -> net.NetConfig:
        return net.NetConfig(d=d, cond_dim=cond_dim, hidden=(self.width,) * self.depth,
                             noise_embed_dim=self.noise_embed_dim, dropout=self.dropout, sigma_data=sigma_data)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = 'runs'
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augmentation: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: trn.TrainConfig = field(default_factory=trn.TrainConfig)
    sampler: smp.SamplerConfig = field(default_factory=smp.SamplerConfig)
    sample_count: int = 64
    verify: thm.VerifyConfig = field(default_factory=thm.VerifyConfig)
    source: str | None = field(default=None, compare=False)

    def with_seed(self, seed: int):
        '''Copy with the run seed pushed into every seeded section.'''
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed),
                                   verify=dataclasses.replace(self.verify, seed=seed))


# ============================================================================
# PARSING
# ============================================================================

def _line_index(lines):
    '''(section, key) -> 1-based line number, and section -> line of its header.'''
    dict_keys, dict_sections = {}, {}
    section = None
    for num, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in '#;':
            continue
        match = re.match(r'^\[([^\]]+)\]$', stripped)
        if match:
            section = match.group(1).strip()
            dict_sections.setdefault(section, num)
            continue
        match = re.match(r'^([^=:]+?)\s*[=:]', stripped)
        if match and section is not None:
            dict_keys.setdefault((section, match.group(1).strip()), num)
    return dict_keys, dict_sections


def config_resolve(name_or_path) -> pathlib.Path:
    '''An existing path, or the name of a bundled config in resources/.'''
    path = pathlib.Path(name_or_path)
    if path.is_file():
        return path
    for candidate in (path_resources / f'{name_or_path}.ini', path_resources / f'{config_prefix}{name_or_path}.ini'):
        if candidate.is_file():
            return candidate
    raise ConfigError(f"config not found (no file and no bundled config named {str(name_or_path)!r})", path)


def config_parse_text(text: str, path='<config>', base_dir=None) -> RunConfig:
    """
    Parse INI text into a RunConfig.

    Raises:
        ConfigError: unknown section or key, bad value, missing dataset file.
    """
    lines = text.splitlines()
    dict_keys, dict_sections = _line_index(lines)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}", path, getattr(e, 'lineno', None)) from e

    values = {}
    for section in parser.sections():
        if section not in dict_schema:
            raise ConfigError(f"unknown section [{section}] (known: {', '.join(dict_schema)})",
                              path, dict_sections.get(section))
        values[section] = {}
        for key, raw in parser.items(section):
            line = dict_keys.get((section, key))
            if key not in dict_schema[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", path, line)
            try:
                values[section][key] = dict_schema[section][key](raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {section}.{key}: {e}", path, line) from e

    def section_line(section):
        return dict_sections.get(section)

    try:
        cfg = _config_build(values, base_dir)
    except ConfigError as e:
        raise ConfigError(str(e), path, None) from e
    except ValueError as e:
        section = getattr(e, 'section', None)
        raise ConfigError(str(e), path, section_line(section)) from e
    cfg.source = str(path)
    return cfg


def _section_error(section: str, message: str):
    err = ValueError(f"[{section}] {message}")
    err.section = section
    return err


def _config_build(values: dict, base_dir) -> RunConfig:
    run = values.get('run', {})
    seed = run.get('seed', 0)

    ds_vals = dict(values.get('dataset', {}))
    if ds_vals.get('path'):
        ds_path = pathlib.Path(ds_vals['path'])
        if not ds_path.is_absolute() and base_dir is not None:
            ds_path = pathlib.Path(base_dir) / ds_path
        if not ds_path.is_file():
            raise _section_error('dataset', f"dataset file does not exist: {ds_path}")
        ds_vals['path'] = str(ds_path.resolve())
        ds_vals.setdefault('generator', None)
    dataset = DatasetConfig(**ds_vals)
    if dataset.generator is None and dataset.path is None:
        raise _section_error('dataset', "set either 'generator' or 'path'")

    try:
        schedule = ScheduleConfig(**values.get('schedule', {}))
        schedule.build(1.0)
    except ValueError as e:
        raise _section_error('schedule', str(e)) from e

    aug_vals = values.get('augmentation', {})
    try:
        augmentation = _augmentation_build(aug_vals)
    except ValueError as e:
        raise _section_error('augmentation', str(e)) from e

    try:
        model = ModelConfig(**values.get('model', {}))
        model.net_config(1, 0, 1.0)
    except ValueError as e:
        raise _section_error('model', str(e)) from e

    try:
        train = trn.TrainConfig(seed=seed, **values.get('train', {}))
    except (ValueError, TypeError) as e:
        raise _section_error('train', str(e)) from e

    smp_vals = dict(values.get('sampler', {}))
    sample_count = smp_vals.pop('count', 64)
    try:
        if smp_vals.get('condition') is not None:
            smp_vals['condition'] = aug.params_parse(smp_vals['condition'])
        sampler = smp.SamplerConfig(**smp_vals)
    except ValueError as e:
        raise _section_error('sampler', str(e)) from e

    verify = thm.VerifyConfig(seed=seed, **values.get('verify', {}))
    return RunConfig(seed=seed, out_dir=run.get('out_dir', 'runs'), dataset=dataset, schedule=schedule,
                     augmentation=augmentation, model=model, train=train, sampler=sampler,
                     sample_count=sample_count, verify=verify)


def _augmentation_build(vals: dict) -> aug.AugmentConfig:
    '''Preset first, then explicit keys, then per-kind enable flags.'''
    base = aug.AugmentConfig()
    if vals.get('preset'):
        base = aug.aug_config_from_preset(vals['preset'], 1, 1)
    kinds = list(vals.get('kinds', base.kinds))
    for kind in aug.list_aug_kinds:
        flag = vals.get(f'enable_{kind}')
        if flag is True and kind not in kinds:
            kinds.append(kind)
        elif flag is False and kind in kinds:
            kinds.remove(kind)
    # shape is filled in from the dataset at run time
    return dataclasses.replace(base, kinds=tuple(kinds), height=1, width=1, channels=1,
                               brightness_max=vals.get('B', base.brightness_max),
                               translate_ratio=vals.get('R_t', base.translate_ratio),
                               cutout_ratio=vals.get('R_c', base.cutout_ratio),
                               nonlinear_max=vals.get('a_max', base.nonlinear_max))


def config_load(name_or_path, use_env: bool = True) -> RunConfig:
    """
    Resolve, read and parse a config; SCOREAUG_SEED (if set) replaces [run] seed.

    Example:
        cfg = config_load('2d')
    """
    path = config_resolve(name_or_path)
    cfg = config_parse_text(path.read_text(encoding='utf-8'), path, base_dir=path.parent)
    env_value = os.getenv(env_seed) if use_env else None
    if env_value:
        try:
            cfg = cfg.with_seed(int(env_value))
        except ValueError as e:
            raise ConfigError(f"{env_seed} must be an integer, got {env_value!r}") from e
    cfg.source = str(path)
    return cfg


def augmentation_for_shape(cfg: RunConfig, shape_hwc: tuple) -> aug.AugmentConfig:
    H, W, C = shape_hwc
    return dataclasses.replace(cfg.augmentation, height=H, width=W, channels=C)


# ============================================================================
# SNAPSHOT
# ============================================================================

def _fmt(value) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ', '.join(str(v) for v in value)
    return str(value)


def config_to_ini(cfg: RunConfig) -> str:
    '''Effective config as INI text; parses back to an equal RunConfig.'''
    a = cfg.augmentation
    linear_map = 'none'
    if cfg.verify.linear_map is not None:
        linear_map = '; '.join(' '.join(repr(float(v)) for v in row) for row in cfg.verify.linear_map)
    condition = aug.params_format(cfg.sampler.condition) if cfg.sampler.condition is not None else None
    sections = {
        'run': {'seed': cfg.seed, 'out_dir': cfg.out_dir},
        'dataset': {k: getattr(cfg.dataset, k) for k in dict_schema['dataset']},
        'schedule': {k: getattr(cfg.schedule, k) for k in dict_schema['schedule']},
        'augmentation': {'kinds': a.kinds, 'B': a.brightness_max, 'R_t': a.translate_ratio,
                         'R_c': a.cutout_ratio, 'a_max': a.nonlinear_max},
        'model': {k: getattr(cfg.model, k) for k in dict_schema['model']},
        'train': {k: getattr(cfg.train, k) for k in dict_schema['train']},
        'sampler': {'n_steps': cfg.sampler.n_steps, 'sigma_max': cfg.sampler.sigma_max,
                    'sigma_min': cfg.sampler.sigma_min, 'rho': cfg.sampler.rho, 'condition': condition,
                    'null_condition': cfg.sampler.null_condition, 'count': cfg.sample_count},
        'verify': {'sigma': cfg.verify.sigma, 'n_mc': cfg.verify.n_mc,
                   'grid_resolution': cfg.verify.grid_resolution},
    }
    out = []
    for section, items in sections.items():
        out.append(f'[{section}]')
        for key, value in items.items():
            out.append(f'{key} = {_fmt(value)}')
        if section == 'verify':
            out.append(f'linear_map = {linear_map}')
        out.append('')
    return '\n'.join(out)


def config_write(path, cfg: RunConfig):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_ini(cfg), encoding='utf-8')
    return path
