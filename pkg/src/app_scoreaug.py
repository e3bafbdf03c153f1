#!/usr/bin/env python3
"""
ScoreAug desk-scale experiments: verify, train, sample, report, gen-data.
"""

import argparse
import dataclasses
import os
import pathlib

import numpy as np

import aug_transforms as aug
import cfg_run as cfg
import db_datasets as dbd
import db_runs as dbr
import net_denoiser as net
import sampler_heun as smp
import thm_verify as thm
import train_scoreaug as trn
import vpr_runtools as vpr


EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_USAGE = 2
EXIT_RUN_FAILED = 3

file_verify_csv = 'verify.csv'
file_samples = 'samples'
dir_report = 'report'


def fail(message: str, exit_code: int = EXIT_USAGE) -> None:
    print(f"ERROR: {message}")
    raise SystemExit(exit_code)


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog='app_scoreaug',
        description="Score-augmented diffusion training at desk scale",
        epilog=(
            "Examples:\n"
            "  %(prog)s verify --config default\n"
            "  %(prog)s verify --filter divergence\n"
            "  %(prog)s train --config 2d --variant edm --seed 1 --out-dir runs/edm_s1\n"
            "  %(prog)s sample --checkpoint runs/edm_s1/checkpoint_final.bin --condition rotation:2\n"
            "  %(prog)s report runs/ --out runs/report\n"
            "  %(prog)s gen-data --generator glyphs8x8 --n 16 --out data/glyphs.txt\n\n"
            "Configs are INI files or bundled names (default, 2d, glyphs).\n"
            f"Environment:\n"
            f"  {cfg.env_seed}: overrides [run] seed\n"
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p_verify = sub.add_parser('verify', help="Score-transformation and oracle checks, CSV report")
    p_verify.add_argument('--config', default='default', help="Config path or bundled name (default: default)")
    p_verify.add_argument('--filter', default=None, help="Only checks of this group or case-id prefix")
    p_verify.add_argument('--out', default=file_verify_csv, help=f"CSV report path (default: {file_verify_csv})")

    p_train = sub.add_parser('train', help="Train one denoiser into a run directory")
    p_train.add_argument('--config', default='default', help="Config path or bundled name (default: default)")
    p_train.add_argument('--seed', type=int, default=None, help="Overrides [run] seed and SCOREAUG_SEED")
    p_train.add_argument('--out-dir', default=None, help="Run directory (default: [run] out_dir)")
    p_train.add_argument('--variant', choices=trn.list_variants, default=None, help="Overrides [train] variant")
    p_train.add_argument('--steps', type=int, default=None, help="Overrides [train] steps")
    p_train.add_argument('--n-train', type=int, default=None, help="Overrides [dataset] n")
    p_train.add_argument('--width', type=int, default=None, help="Overrides [model] width")
    p_train.add_argument('--conditioning', choices=['on', 'off'], default=None, help="Overrides [train] conditioning")
    p_train.add_argument('--force', action='store_true', help="Overwrite a run directory holding a previous run")
    p_train.add_argument('--no-progress', action='store_true', help="Disable the progress bar")

    p_sample = sub.add_parser('sample', help="Sample from a checkpoint")
    p_sample.add_argument('--checkpoint', required=True, help="Checkpoint file, or a run directory")
    p_sample.add_argument('--config', default=None, help="Config for schedule/sampler (default: the run's config.ini)")
    p_sample.add_argument('--condition', default=None, help="Fixed augmentation, e.g. rotation:2 or translation:1,-2")
    p_sample.add_argument('--rotation-sweep', action='store_true', help="Sample once per rotation condition 0..3")
    p_sample.add_argument('--count', type=int, default=None, help="Number of samples (default: [sampler] count)")
    p_sample.add_argument('--n-steps', type=int, default=None, help="Overrides [sampler] n_steps")
    p_sample.add_argument('--seed', type=int, default=None, help="Initial-noise seed (default: [run] seed)")
    p_sample.add_argument('--no-ema', action='store_true', help="Use raw instead of EMA parameters")
    p_sample.add_argument('--out-dir', default=None, help="Output directory (default: <run>/samples)")

    p_report = sub.add_parser('report', help="Aggregate run directories into comparison tables")
    p_report.add_argument('paths', nargs='+', help="Run directories, or directories holding runs")
    p_report.add_argument('--out', default=None, help=f"Output directory (default: <first path>/{dir_report})")

    p_gen = sub.add_parser('gen-data', help="Write a generated dataset file")
    p_gen.add_argument('--config', default=None, help="Take generator settings from this config's [dataset]")
    p_gen.add_argument('--generator', default=None, choices=sorted(dbd.dict_generators))
    p_gen.add_argument('--n', type=int, default=None)
    p_gen.add_argument('--seed', type=int, default=None)
    p_gen.add_argument('--d', type=int, default=None, help="Dimension (gaussian only)")
    p_gen.add_argument('--std', type=float, default=None, help="Standard deviation (gaussian only)")
    p_gen.add_argument('--out', required=True, help="Dataset file to write")
    p_gen.add_argument('--pgm', action='store_true', help="Also write PGMs for image-shaped data")

    return parser.parse_args(argv)


def config_or_fail(name_or_path, use_env: bool = True) -> cfg.RunConfig:
    try:
        return cfg.config_load(name_or_path, use_env=use_env)
    except cfg.ConfigError as e:
        fail(str(e))


###############################################################################
###############################################################################
def run_datasets(run_cfg: cfg.RunConfig):
    """
    Training and held-out sets for a run config.

    Generator configs draw n + n_heldout points and keep the last n_heldout
    out; otherwise train heldout_fraction splits the loaded set. sigma_data
    comes from the training points only unless [dataset] sigma_data is set.

    Returns:
        tuple: (train_ds, heldout_ds or None)
    """
    dcfg = run_cfg.dataset
    if dcfg.path is not None:
        ds = dbd.dataset_read(dcfg.path, sigma_data=dcfg.sigma_data)
        n_heldout = 0
    else:
        ds = dbd.dataset_generate(dcfg.generator, dcfg.n + dcfg.n_heldout, dcfg.seed, d=dcfg.d, std=dcfg.std)
        n_heldout = dcfg.n_heldout
    if n_heldout == 0 and run_cfg.train.heldout_fraction > 0:
        n_heldout = int(round(run_cfg.train.heldout_fraction * ds.N))
    return dbd.dataset_split(ds, n_heldout, sigma_data=dcfg.sigma_data)

# end of def run_datasets(run_cfg):


def cmd_verify(args) -> int:
    run_cfg = config_or_fail(args.config)
    cases = thm.verify_suite(run_cfg.verify)
    reports = thm.verify_suite_run(cases, args.filter)
    if not reports:
        fail(f"No checks match filter {args.filter!r} (groups: {', '.join(thm.list_groups)})")
    path = thm.verify_csv_write(args.out, reports)
    print(f"[VERIFY] report -> {path}")
    all_pass = all(rep.status == thm.status_pass for rep in reports)
    return EXIT_OK if all_pass else EXIT_CHECKS_FAILED


def train_config_apply_flags(run_cfg: cfg.RunConfig, args) -> cfg.RunConfig:
    '''CLI flags over config values; the result is what config.ini records.'''
    if args.seed is not None:
        run_cfg = run_cfg.with_seed(args.seed)
    train_changes = {}
    if args.variant is not None:
        train_changes['variant'] = args.variant
    if args.steps is not None:
        train_changes['steps'] = args.steps
    if args.conditioning is not None:
        train_changes['conditioning'] = args.conditioning == 'on'
    try:
        if train_changes:
            run_cfg = dataclasses.replace(run_cfg, train=dataclasses.replace(run_cfg.train, **train_changes))
        if args.n_train is not None:
            run_cfg = dataclasses.replace(run_cfg, dataset=dataclasses.replace(run_cfg.dataset, n=args.n_train))
        if args.width is not None:
            run_cfg = dataclasses.replace(run_cfg, model=dataclasses.replace(run_cfg.model, width=args.width))
    except ValueError as e:
        fail(f"Invalid override: {e}")
    if args.out_dir is not None:
        run_cfg = dataclasses.replace(run_cfg, out_dir=args.out_dir)
    return run_cfg


def cmd_train(args) -> int:
    run_cfg = train_config_apply_flags(config_or_fail(args.config), args)
    tcfg = run_cfg.train
    try:
        path_run = vpr.run_dir_prepare(run_cfg.out_dir, force=args.force)
    except vpr.RunDirConflictError as e:
        fail(str(e))

    try:
        train_ds, heldout_ds = run_datasets(run_cfg)
        shape = train_ds.shape_hwc()
        aug_cfg = None
        if tcfg.variant != trn.variant_edm:
            aug_cfg = cfg.augmentation_for_shape(run_cfg, shape)
        schedule = run_cfg.schedule.build(train_ds.sigma_data)
        cond_dim = aug.COND_DIM if tcfg.conditioning else 0
        net_cfg = run_cfg.model.net_config(train_ds.d, cond_dim, schedule.sigma_data)
    except (ValueError, OSError) as e:
        fail(f"Cannot set up run: {e}")

    cfg.config_write(path_run / vpr.file_config_snapshot, run_cfg)
    info = {'seed': run_cfg.seed, 'variant': tcfg.variant, 'conditioning': tcfg.conditioning,
            'n_train': train_ds.N, 'n_heldout': heldout_ds.N if heldout_ds is not None else 0,
            'width': run_cfg.model.width, 'depth': run_cfg.model.depth, 'd': train_ds.d,
            'image_shape': list(train_ds.image_shape) if train_ds.image_shape is not None else None,
            'formulation': schedule.formulation, 'sigma_data': schedule.sigma_data,
            'config_source': run_cfg.source}
    vpr.run_info_write(path_run, **info)

    try:
        result = trn.train_run(tcfg, net_cfg, aug_cfg, train_ds, heldout_ds, schedule, run_cfg.sampler,
                               out_dir=path_run, progress=not args.no_progress)
    except trn.TrainingDivergedError as e:
        fail(f"{e} (last checkpoint: {e.checkpoint_path})", EXIT_RUN_FAILED)

    info = vpr.run_info_read(path_run)
    (path_run / vpr.file_report).write_text(dbr.run_report_text(info, result.metrics), encoding='utf-8')
    print(f"\nDone\n  Run    : {path_run}\n  Metrics: {path_run / trn.file_metrics}\n"
          f"  Final  : {result.checkpoint_final}")
    return EXIT_OK


def _sample_tag(params: aug.AugmentationParams | None) -> str:
    if params is None:
        return file_samples
    return file_samples + '_' + aug.params_format(params).replace(':', '_').replace(',', '_')


def cmd_sample(args) -> int:
    path_ckpt = pathlib.Path(args.checkpoint)
    if path_ckpt.is_dir():
        path_ckpt = path_ckpt / trn.file_ckpt_final
    if not path_ckpt.is_file():
        fail(f"Checkpoint not found: {path_ckpt}")
    path_run = path_ckpt.parent

    if args.config is not None:
        run_cfg = config_or_fail(args.config)
    elif (path_run / vpr.file_config_snapshot).is_file():
        run_cfg = config_or_fail(path_run / vpr.file_config_snapshot, use_env=False)
    else:
        run_cfg = config_or_fail('default')

    try:
        ckpt = net.checkpoint_load(path_ckpt)
    except (OSError, ValueError) as e:
        fail(f"Cannot read checkpoint {path_ckpt}: {e}")
    model = net.net_from_checkpoint(ckpt, use_ema=not args.no_ema)

    image_shape = None
    if (path_run / vpr.file_run_info).is_file():
        shape = vpr.run_info_read(path_run).get('image_shape')
        image_shape = tuple(shape) if shape else None
    H, W = (image_shape[0], image_shape[1]) if image_shape is not None else (1, 1)

    sampler_cfg = run_cfg.sampler
    try:
        if args.n_steps is not None:
            sampler_cfg = dataclasses.replace(sampler_cfg, n_steps=args.n_steps)
        params = aug.params_parse(args.condition, H, W) if args.condition is not None else sampler_cfg.condition
        if params is not None:
            params = dataclasses.replace(params, height=H, width=W)
    except ValueError as e:
        fail(str(e))
    if (params is not None or args.rotation_sweep) and ckpt.cfg.cond_dim == 0:
        fail("Checkpoint was trained without conditioning; --condition needs a conditioned model")

    schedule = run_cfg.schedule.build(ckpt.cfg.sigma_data)
    count = args.count if args.count is not None else run_cfg.sample_count
    seed = args.seed if args.seed is not None else run_cfg.seed
    out_dir = pathlib.Path(args.out_dir) if args.out_dir is not None else path_run / file_samples
    out_dir.mkdir(parents=True, exist_ok=True)
    denoiser = net.net_denoiser_fn(model)

    if args.rotation_sweep:
        smp.conditioned_generation_sweep(denoiser, sampler_cfg, schedule, seed, count, ckpt.cfg.d,
                                         out_dir=out_dir, image_shape=image_shape)
        return EXIT_OK

    cond = None
    if params is not None:
        cond = aug.condition_vector(params)
    elif ckpt.cfg.cond_dim:
        cond = aug.condition_null(sampler_cfg.null_condition)
    try:
        samples = smp.heun_sample(denoiser, sampler_cfg, schedule, np.random.default_rng(seed), count,
                                  ckpt.cfg.d, cond=cond)
    except net.NumericalFailureError as e:
        fail(str(e), EXIT_RUN_FAILED)

    tag = _sample_tag(params)
    path = dbd.samples_write(out_dir / f'{tag}{dbd.file_ext_dataset}', samples, image_shape)
    if image_shape is not None:
        dbd.pgm_write_batch(out_dir / tag, samples, image_shape)
    print(f"[SAMPLE] {count} samples (nfe={sampler_cfg.nfe}) -> {path}")
    return EXIT_OK

# end of def cmd_sample(args):


def cmd_report(args) -> int:
    dir_out = args.out if args.out is not None else os.path.join(args.paths[0], dir_report)
    try:
        result = dbr.report_build(args.paths, dir_out)
    except FileNotFoundError as e:
        fail(str(e))
    print('\t'.join(dbr.list_compare_columns))
    for row in result['compare']:
        print('\t'.join(dbr.fmt_cell(row[col]) for col in dbr.list_compare_columns))
    return EXIT_OK if not result['stats']['errors'] else EXIT_CHECKS_FAILED


def cmd_gen_data(args) -> int:
    dcfg = config_or_fail(args.config).dataset if args.config is not None else cfg.DatasetConfig()
    generator = args.generator or dcfg.generator
    if generator is None:
        fail("No generator given (use --generator or a config with [dataset] generator)")
    n = args.n if args.n is not None else dcfg.n
    seed = args.seed if args.seed is not None else dcfg.seed
    d = args.d if args.d is not None else dcfg.d
    std = args.std if args.std is not None else dcfg.std
    try:
        ds = dbd.dataset_generate(generator, n, seed, d=d, std=std)
    except ValueError as e:
        fail(str(e))
    path = dbd.dataset_write(args.out, ds)
    if args.pgm and ds.image_shape is not None:
        dbd.pgm_write_batch(pathlib.Path(args.out).with_suffix(''), ds.points, ds.image_shape)
    print(f"[GEN-DATA][{generator}] N={ds.N} d={ds.d} -> {path}")
    return EXIT_OK


dict_commands = {
    'verify': cmd_verify,
    'train': cmd_train,
    'sample': cmd_sample,
    'report': cmd_report,
    'gen-data': cmd_gen_data,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    return dict_commands[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
