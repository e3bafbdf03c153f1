"""
Training
========
Denoising losses (plain, ScoreAug, ScoreAug with separately transformed
noise, and the plain data-augmentation baseline), the training loop, and
the overfitting diagnostics recorded while it runs.

Losses take any numpy denoiser `(x, sigma, cond) -> D`: a network wrapped
with net.net_denoiser_fn or an oracle from oracle_denoiser_fn. `n` is always
the already-scaled noise draw, n ~ N(0, sigma^2 I).
"""

import csv, inspect, pathlib
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from tqdm import tqdm

import aug_transforms as aug
import net_denoiser as net
import oracle_mixture as orc
import sampler_heun as smp
import sched_noise as sch
import vpr_runtools as vpr


variant_edm = 'edm'
variant_scoreaug = 'scoreaug'
variant_scoreaug_nonlinear = 'scoreaug_nonlinear'
variant_dataaug = 'dataaug'
list_variants = [variant_edm, variant_scoreaug, variant_scoreaug_nonlinear, variant_dataaug]

list_metrics_columns = ['step', 'train_loss', 'heldout_loss', 'gap', 'oracle_loss_floor', 'batch_loss',
                        'nn_p10', 'nn_median', 'nn_p90']

file_metrics = vpr.file_metrics
file_ckpt_last = vpr.file_ckpt_last
file_ckpt_final = vpr.file_ckpt_final


class TrainingDivergedError(RuntimeError):
    '''Non-finite loss or parameters; the last good checkpoint (if any) stays on disk.'''

    def __init__(self, message: str, step: int, checkpoint_path=None):
        self.step = step
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


@dataclass
class TrainConfig:
    '''
    Attributes:
        variant: one of list_variants
        conditioning: feed condition_vector(omega) to the network
        heldout_fraction: share of the dataset kept out of training, in [0, 0.5]
        eval_every: steps between metrics rows (a row is also written at step 0 and at the end)
        n_eval: draws per set for the fixed-draw evaluation losses
        eval_samples: sampler outputs per metrics row for the NN-distance columns
    '''
    variant: str = variant_scoreaug
    conditioning: bool = False
    batch_size: int = 128
    steps: int = 20000
    learning_rate: float = 1e-3
    ema_halflife: float = 500.0
    heldout_fraction: float = 0.0
    seed: int = 0
    eval_every: int = 1000
    n_eval: int = 1000
    eval_samples: int = 64
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.variant not in list_variants:
            raise ValueError(f"Unknown loss variant: {self.variant!r} (known: {list_variants})")
        if self.batch_size < 1:
            raise ValueError(f"Batch size must be >= 1: {self.batch_size!r}")
        if self.steps < 0:
            raise ValueError(f"Step count must be >= 0: {self.steps!r}")
        if not 0.0 <= self.heldout_fraction <= 0.5:
            raise ValueError(f"Held-out fraction must lie in [0, 0.5]: {self.heldout_fraction!r}")
        if self.eval_every < 1 or self.n_eval < 1 or self.eval_samples < 1:
            raise ValueError("eval_every, n_eval and eval_samples must be >= 1")
        if not self.learning_rate > 0 or not self.ema_halflife > 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and ema_halflife must be positive, weight_decay non-negative")


@dataclass
class RunResult:
    metrics: list = field(default_factory=list)
    checkpoint_last: pathlib.Path | None = None
    checkpoint_final: pathlib.Path | None = None
    final: net.Checkpoint | None = None


###############################################################################
###############################################################################
def oracle_denoiser_fn(ds: orc.EmpiricalDataset, op: aug.LinearOperator | None = None):
    '''Closed-form denoiser as a numpy callable; the condition is ignored.'''
    def denoise(x, sigma, cond=None):
        sigma = np.asarray(sigma, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        if sigma.ndim == 0:
            return orc.optimal_denoiser(x, float(sigma), ds) if op is None else orc.optimal_denoiser_aug(x, float(sigma), op, ds)
        out = np.empty_like(x)
        for idx in range(x.shape[0]):
            s = float(sigma[idx])
            out[idx] = orc.optimal_denoiser(x[idx], s, ds) if op is None else orc.optimal_denoiser_aug(x[idx], s, op, ds)
        return out
    return denoise


def batch_inputs(variant: str, x0, n, params: aug.AugmentationParams | None, shape: tuple, conditioning: bool):
    """
    Network input, regression target and condition for a batch sharing one omega.

    Returns:
        tuple: (x_in, target, cond or None)
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    if variant == variant_edm or params is None:
        return x0 + n, x0, None

    cond = None
    if conditioning:
        cond = np.broadcast_to(aug.condition_vector(params), (x0.shape[0], aug.COND_DIM))

    if variant == variant_scoreaug:
        if not params.is_linear:
            raise ValueError(f"Kind {params.kind} has no matrix form; use the scoreaug_nonlinear variant")
        op = aug.build_operator(params, *shape)
        return op.apply(x0 + n), op.apply(x0), cond

    if variant == variant_scoreaug_nonlinear:
        if params.is_linear:
            # T(d) + T(n) = T(d + n); summing first keeps this bit-identical to scoreaug
            op = aug.build_operator(params, *shape)
            return op.apply(x0 + n), op.apply(x0), cond
        target = aug.smooth_map_apply(params.a, x0)
        return target + aug.smooth_map_apply(params.a, n), target, cond

    if variant == variant_dataaug:
        target = aug.apply_transform(params, x0, *shape)
        return target + n, target, cond

    raise ValueError(f"Unknown loss variant: {variant!r}")


def _weighted_sq_err(denoiser, x_in, target, sigma, cond, sigma_data):
    out = denoiser(x_in, sigma, cond)
    return sch.loss_weight(sigma, sigma_data) * np.sum((out - target) ** 2, axis=-1)


def edm_loss_sample(denoiser, d, n, sigma: float, sigma_data: float) -> float:
    '''lambda(sigma) ||D(d + n; sigma) - d||^2 with the all-zero condition.'''
    x_in, target, _ = batch_inputs(variant_edm, d, n, None, (), False)
    return float(_weighted_sq_err(denoiser, x_in, target, np.array([sigma]), None, sigma_data)[0])


def scoreaug_loss_sample(denoiser, d, n, sigma: float, params: aug.AugmentationParams, shape: tuple,
                         sigma_data: float, conditioning: bool = False) -> float:
    '''lambda(sigma) ||D(T(d + n); sigma, omega) - T(d)||^2, padded zeros included.'''
    x_in, target, cond = batch_inputs(variant_scoreaug, d, n, params, shape, conditioning)
    return float(_weighted_sq_err(denoiser, x_in, target, np.array([sigma]), cond, sigma_data)[0])


def scoreaug_nonlinear_loss_sample(denoiser, d, n, sigma: float, params: aug.AugmentationParams, shape: tuple,
                                   sigma_data: float, conditioning: bool = False) -> float:
    '''lambda(sigma) ||D(T(d) + T(n); sigma, omega) - T(d)||^2; accepts smooth_nonlinear.'''
    x_in, target, cond = batch_inputs(variant_scoreaug_nonlinear, d, n, params, shape, conditioning)
    return float(_weighted_sq_err(denoiser, x_in, target, np.array([sigma]), cond, sigma_data)[0])


def dataaug_loss_sample(denoiser, d, n, sigma: float, params: aug.AugmentationParams, shape: tuple,
                        sigma_data: float, conditioning: bool = False) -> float:
    '''lambda(sigma) ||D(T(d) + n; sigma, omega) - T(d)||^2, noise added after the transform.'''
    x_in, target, cond = batch_inputs(variant_dataaug, d, n, params, shape, conditioning)
    return float(_weighted_sq_err(denoiser, x_in, target, np.array([sigma]), cond, sigma_data)[0])


def objective_estimate(denoiser, ds: orc.EmpiricalDataset, variant: str, aug_cfg: aug.AugmentConfig | None,
                       n_draws: int, seed: int = 0, conditioning: bool = False) -> float:
    """
    Monte Carlo value of a loss variant for a denoiser: mean over the n_draws
    evaluation draws of (x0, sigma, n), with a fresh omega per draw.
    """
    rng = np.random.default_rng(seed)
    shape = ds.shape_hwc()
    x0, n, sigma = _eval_draws(ds, n_draws, rng)
    total = 0.0
    for idx in range(n_draws):
        params = aug.sample_params(rng, aug_cfg) if variant != variant_edm else None
        x_in, target, cond = batch_inputs(variant, x0[idx], n[idx], params, shape, conditioning)
        total += float(_weighted_sq_err(denoiser, x_in, target, sigma[idx:idx + 1], cond, ds.sigma_data)[0])
    return total / n_draws


###############################################################################
###############################################################################
def _eval_draws(ds: orc.EmpiricalDataset, count: int, rng: np.random.Generator):
    '''
    Evaluation draws (x0, n, sigma) in antithetic pairs (x_i, +n), (x_i, -n)
    sharing one sigma; the pair sigmas are stratified and x0 cycles through
    the dataset in shuffled order.
    '''
    n_pairs = -(-count // 2)
    sigma_pair = sch.sample_sigma_stratified(rng, n_pairs)
    z_pair = rng.standard_normal((n_pairs, ds.d))
    idx = np.repeat(rng.permutation(np.arange(n_pairs) % ds.N), 2)[:count]
    sigma = np.repeat(sigma_pair, 2)[:count]
    z = np.stack([z_pair, -z_pair], axis=1).reshape(2 * n_pairs, ds.d)[:count]
    return ds.points[idx], sigma[:, None] * z, sigma


def _posterior_moments(query, sigma, ds: orc.EmpiricalDataset, op: aug.LinearOperator | None = None):
    '''Per-draw posterior mean and trace of the posterior covariance of (T) x0.'''
    centers = ds.points if op is None else op.apply(ds.points)
    mean = np.empty((len(sigma), centers.shape[1]))
    var = np.empty(len(sigma))
    for idx in range(len(sigma)):
        weights = orc.posterior_weights(query[idx], float(sigma[idx]), ds, op)
        mean[idx] = weights @ centers
        var[idx] = weights @ np.sum((centers - mean[idx]) ** 2, axis=-1)
    return mean, var


def edm_loss_eval(denoiser, ds: orc.EmpiricalDataset, n_eval: int, seed: int, sigma_data: float,
                  conditional: bool = True) -> float:
    '''
    Mean plain loss over n_eval draws from a fresh generator seeded with `seed`.

    With conditional, ||D - x0||^2 is replaced by its mean over x0 given the
    query under ds itself, ||D - E[x0|x]||^2 + tr Cov[x0|x]. The expectation is
    unchanged and the per-draw value never drops below the floor term.
    '''
    x0, n, sigma = _eval_draws(ds, n_eval, np.random.default_rng(seed))
    if not conditional:
        return float(np.mean(_weighted_sq_err(denoiser, x0 + n, x0, sigma, None, sigma_data)))
    query = x0 + n
    post_mean, post_var = _posterior_moments(query, sigma, ds)
    sq_err = np.sum((denoiser(query, sigma, None) - post_mean) ** 2, axis=-1) + post_var
    return float(np.mean(sch.loss_weight(sigma, sigma_data) * sq_err))


def heldout_gap(denoiser, train_ds: orc.EmpiricalDataset, heldout_ds: orc.EmpiricalDataset,
                n_eval: int, seed: int = 0):
    """
    Plain denoising loss on train and held-out points, same draw recipe for both.

    Returns:
        tuple: (train_loss, heldout_loss, gap = heldout - train)
    """
    train_loss = edm_loss_eval(denoiser, train_ds, n_eval, seed, train_ds.sigma_data)
    heldout_loss = edm_loss_eval(denoiser, heldout_ds, n_eval, seed, train_ds.sigma_data)
    return train_loss, heldout_loss, heldout_loss - train_loss


def oracle_loss_floor(ds: orc.EmpiricalDataset, n_eval: int, seed: int = 0,
                      op: aug.LinearOperator | None = None) -> float:
    '''
    Mean of lambda(sigma) * posterior variance over the draws edm_loss_eval
    uses; the smallest value any denoiser can reach on them in expectation.
    With op, the queries are T(x0 + n) and the floor is the augmented one.
    '''
    x0, n, sigma = _eval_draws(ds, n_eval, np.random.default_rng(seed))
    query = x0 + n if op is None else op.apply(x0 + n)
    _mean, floors = _posterior_moments(query, sigma, ds, op)
    return float(np.mean(sch.loss_weight(sigma, ds.sigma_data) * floors))


def memorization_distance(samples, train_ds: orc.EmpiricalDataset):
    """
    Exact Euclidean nearest-neighbour distance from each sample to the training set.

    Returns:
        tuple: (distances array, {'p10', 'median', 'p90'})
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 1:
        raise ValueError("memorization_distance needs at least one sample")
    dist, _idx = cKDTree(train_ds.points).query(samples, k=1)
    stats = {'p10': float(np.quantile(dist, 0.1)), 'median': float(np.median(dist)),
             'p90': float(np.quantile(dist, 0.9))}
    return dist, stats


###############################################################################
###############################################################################
def _metrics_write(path, rows):
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(list_metrics_columns)
        for row in rows:
            writer.writerow([row['step']] + ['%.17g' % row[col] for col in list_metrics_columns[1:]])


def metrics_read(path) -> list[dict]:
    with open(path, newline='', encoding='utf-8') as fh:
        return [{k: (int(v) if k == 'step' else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def train_run(cfg: TrainConfig, net_cfg: net.NetConfig, aug_cfg: aug.AugmentConfig | None,
              train_ds: orc.EmpiricalDataset, heldout_ds: orc.EmpiricalDataset | None = None,
              schedule: sch.DiffusionSchedule | None = None, sampler_cfg: smp.SamplerConfig | None = None,
              out_dir=None, progress: bool = True) -> RunResult:
    """
    Train a denoiser on train_ds with cfg.variant.

    Per step: a batch of indices, sigma ~ prior and noise from the data stream;
    one omega per step from the augmentation stream; an Adam step; an EMA update.
    The streams are spawned from cfg.seed separately, so an identity-only
    augmentation run consumes exactly the draws the plain run does.

    Metrics rows (step 0, every eval_every steps, final) evaluate the EMA
    parameters on fixed draws. With out_dir, metrics.csv and
    checkpoint_last.bin are refreshed at each row, checkpoint_final.bin at the end.

    Raises:
        TrainingDivergedError: non-finite loss or parameters.
    """
    func_name = inspect.stack()[0][3]
    dbh = '[{}]'.format(func_name)

    if cfg.variant != variant_edm and aug_cfg is None:
        raise ValueError(f"Variant {cfg.variant} needs an augmentation config")
    if cfg.variant == variant_scoreaug and aug.kind_smooth_nonlinear in aug_cfg.kinds:
        raise ValueError("smooth_nonlinear needs the scoreaug_nonlinear (or dataaug) variant")
    if net_cfg.d != train_ds.d:
        raise ValueError(f"Dimension mismatch: network d={net_cfg.d}, dataset d={train_ds.d}")
    schedule = schedule or sch.DiffusionSchedule(sigma_data=train_ds.sigma_data)
    sampler_cfg = sampler_cfg or smp.SamplerConfig()
    heldout_ds = heldout_ds if heldout_ds is not None else train_ds
    shape = train_ds.shape_hwc()
    out_dir = pathlib.Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    seq_data, seq_aug, seq_eval = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_data = np.random.default_rng(seq_data)
    rng_aug = np.random.default_rng(seq_aug)
    eval_seed = int(seq_eval.generate_state(1)[0])

    model = net.net_build(net_cfg, seed=cfg.seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    ema = net.params_get(model)
    beta = net.ema_beta(cfg.ema_halflife)
    eval_model = net.DenoiserNet(net_cfg)
    floor = oracle_loss_floor(train_ds, cfg.n_eval, eval_seed)

    print(f'[TRAIN][{cfg.variant}] steps={cfg.steps} batch={cfg.batch_size} N={train_ds.N} d={train_ds.d} '
          f'conditioning={cfg.conditioning} params={net_cfg.param_count}')

    result = RunResult()
    path_last = out_dir / file_ckpt_last if out_dir is not None else None

    def checkpoint(step):
        m, v, adam_step = net.adam_state_get(optimizer, model)
        return net.Checkpoint(net_cfg, step, net.params_get(model), ema.copy(), m, v, adam_step)

    def eval_row(step, batch_loss):
        net.params_set(eval_model, ema)
        eval_model.eval()
        denoiser = net.net_denoiser_fn(eval_model)
        train_loss, heldout_loss, gap = heldout_gap(denoiser, train_ds, heldout_ds, cfg.n_eval, eval_seed)
        cond = None
        if cfg.conditioning:
            cond = aug.condition_null(sampler_cfg.null_condition)
        samples = smp.heun_sample(denoiser, sampler_cfg, schedule, np.random.default_rng(eval_seed),
                                  cfg.eval_samples, train_ds.d, cond=cond)
        _dist, stats = memorization_distance(samples, train_ds)
        row = {'step': step, 'train_loss': train_loss, 'heldout_loss': heldout_loss, 'gap': gap,
               'oracle_loss_floor': floor, 'batch_loss': train_loss if batch_loss is None else batch_loss,
               'nn_p10': stats['p10'], 'nn_median': stats['median'], 'nn_p90': stats['p90']}
        result.metrics.append(row)
        if out_dir is not None:
            _metrics_write(out_dir / file_metrics, result.metrics)
            net.checkpoint_save(path_last, checkpoint(step))
            result.checkpoint_last = path_last

    eval_row(0, None)
    list_batch_loss = []
    for step in tqdm(range(1, cfg.steps + 1), disable=not progress, desc=f'[TRAIN][{cfg.variant}]'):
        idx = rng_data.integers(train_ds.N, size=cfg.batch_size)
        sigma = sch.sample_sigma(rng_data, size=cfg.batch_size)
        n = sigma[:, None] * rng_data.standard_normal((cfg.batch_size, train_ds.d))
        params = aug.sample_params(rng_aug, aug_cfg) if cfg.variant != variant_edm else None
        x_in, target, cond = batch_inputs(cfg.variant, train_ds.points[idx], n, params, shape, cfg.conditioning)

        try:
            loss, _grad = net.loss_and_grad(model, x_in, target, sigma, cond,
                                            sch.loss_weight(sigma, train_ds.sigma_data))
        except net.NumericalFailureError as e:
            raise TrainingDivergedError(f"Training diverged at step {step}: {e}", step, result.checkpoint_last) from e
        optimizer.step()
        theta = net.params_get(model)
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergedError(f"Non-finite parameters after step {step}", step, result.checkpoint_last)
        ema = net.ema_update(ema, theta, beta)
        list_batch_loss.append(loss)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            eval_row(step, float(np.mean(list_batch_loss)))
            list_batch_loss = []

    result.final = checkpoint(cfg.steps)
    if out_dir is not None:
        result.checkpoint_final = net.checkpoint_save(out_dir / file_ckpt_final, result.final)
    last = result.metrics[-1]
    print(dbh + f' done: train_loss={last["train_loss"]:.5f} floor={floor:.5f} gap={last["gap"]:.5f}')
    return result

# end of def train_run(cfg, net_cfg, aug_cfg, train_ds, ...):
