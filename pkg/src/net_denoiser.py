"""
Denoiser Network
================
Small fully-connected denoiser with preconditioning and augmentation
conditioning:

    D(x; sigma, omega) = c_skip x + c_out F(c_in x; c_noise, omega)

F sees concat(c_in x, e), where e is a sinusoidal embedding of c_noise plus
a bias-free linear map of the condition vector. An all-zero condition
therefore reproduces the unconditioned network exactly.

Everything runs in float64 on CPU; gradients come from torch.autograd.
"""

import json, math, os, pathlib, struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import torch
from scipy.integrate import quad
from torch.nn.utils import parameters_to_vector, vector_to_parameters

import sched_noise as sch


DTYPE = torch.float64

CKPT_MAGIC = b'SAUGCKPT'
CKPT_VERSION = 1

EMBED_FREQ_MIN = 1.0
EMBED_FREQ_MAX = 100.0


class NumericalFailureError(RuntimeError):
    '''Non-finite value met during a loss evaluation or an integration step.'''

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message)


@dataclass
class NetConfig:
    '''
    Attributes:
        d: data dimension, also the output dimension
        cond_dim: condition vector length k (0 disables the condition path)
        hidden: widths of the hidden layers
        noise_embed_dim: even length of the sinusoidal noise embedding
        dropout: dropout rate after each hidden activation (training only)
        sigma_data: data scale entering the preconditioning
    '''
    d: int = 2
    cond_dim: int = 0
    hidden: tuple = (256, 256, 256)
    noise_embed_dim: int = 32
    dropout: float = 0.0
    sigma_data: float = 0.5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.d < 1:
            raise ValueError(f"Data dimension must be positive: {self.d!r}")
        if self.cond_dim < 0:
            raise ValueError(f"Condition length must be >= 0: {self.cond_dim!r}")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError(f"Hidden widths must be positive and nonempty: {self.hidden!r}")
        if self.noise_embed_dim < 2 or self.noise_embed_dim % 2:
            raise ValueError(f"Noise embedding size must be even and >= 2: {self.noise_embed_dim!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"Dropout rate must lie in [0, 1): {self.dropout!r}")
        if not self.sigma_data > 0:
            raise ValueError(f"sigma_data must be positive: {self.sigma_data!r}")

    def to_json(self) -> str:
        data = asdict(self)
        data['hidden'] = list(self.hidden)
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_json(cls, text: str):
        return cls(**json.loads(text))

    @property
    def param_count(self) -> int:
        widths = [self.d + self.noise_embed_dim, *self.hidden, self.d]
        dense = sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(widths[:-1], widths[1:]))
        return dense + self.cond_dim * self.noise_embed_dim


@lru_cache(maxsize=1)
def silu_gain() -> float:
    '''1/sqrt(E[silu(z)^2]), z ~ N(0, 1): keeps unit pre-activation variance through SiLU layers.'''
    def integrand(z):
        silu = z / (1.0 + math.exp(-z))
        return silu * silu * math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    second_moment, _err = quad(integrand, -np.inf, np.inf)
    return 1.0 / math.sqrt(second_moment)


###############################################################################
###############################################################################
class DenoiserNet(torch.nn.Module):
    '''
    Example:
        net = net_build(NetConfig(d=2, cond_dim=aug.COND_DIM), seed=0)
        D = net(x, sigma, cond)        # torch tensors, float64
    '''

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        half = cfg.noise_embed_dim // 2
        self.register_buffer('freqs', torch.tensor(np.geomspace(EMBED_FREQ_MIN, EMBED_FREQ_MAX, half), dtype=DTYPE))

        widths = [cfg.d + cfg.noise_embed_dim, *cfg.hidden]
        self.hidden_layers = torch.nn.ModuleList(
            torch.nn.Linear(fan_in, fan_out, dtype=DTYPE) for fan_in, fan_out in zip(widths[:-1], widths[1:]))
        self.out_layer = torch.nn.Linear(widths[-1], cfg.d, dtype=DTYPE)
        self.cond_layer = (torch.nn.Linear(cfg.cond_dim, cfg.noise_embed_dim, bias=False, dtype=DTYPE)
                           if cfg.cond_dim else None)
        self.act = torch.nn.SiLU()
        self.drop = torch.nn.Dropout(cfg.dropout) if cfg.dropout > 0 else None

    def embed(self, c_noise, cond=None):
        args = c_noise[..., None] * self.freqs
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        if self.cond_layer is not None and cond is not None:
            emb = emb + self.cond_layer(cond)
        return emb

    def preactivations(self, h):
        '''Pre-activations of every hidden layer for a first-layer input h.'''
        list_pre = []
        for layer in self.hidden_layers:
            pre = layer(h)
            list_pre.append(pre)
            h = self.act(pre)
        return list_pre

    def raw(self, x_in, c_noise, cond=None):
        h = torch.cat([x_in, self.embed(c_noise, cond)], dim=-1)
        for layer in self.hidden_layers:
            h = self.act(layer(h))
            if self.drop is not None:
                h = self.drop(h)
        return self.out_layer(h)

    def forward(self, x, sigma, cond=None):
        if x.shape[-1] != self.cfg.d:
            raise ValueError(f"Dimension mismatch: network takes d={self.cfg.d}, got {x.shape[-1]}")
        if cond is not None and self.cfg.cond_dim and cond.shape[-1] != self.cfg.cond_dim:
            raise ValueError(f"Dimension mismatch: condition length {cond.shape[-1]} != {self.cfg.cond_dim}")
        sigma = torch.broadcast_to(sigma, x.shape[:-1]).detach().numpy()
        c_skip, c_out, c_in, c_noise = (torch.as_tensor(np.asarray(c, dtype=np.float64))
                                        for c in sch.preconditioning(sigma, self.cfg.sigma_data))
        return (c_skip[..., None] * x
                + c_out[..., None] * self.raw(c_in[..., None] * x, c_noise, cond))

# end of class DenoiserNet


def init_params(seed: int, net: DenoiserNet):
    """
    Variance-scaled normal weights, zero biases, zero output layer.

    First layer: std 1/sqrt(fan_in); later hidden layers: silu_gain()/sqrt(fan_in),
    so standard-normal first-layer inputs give unit-variance pre-activations
    throughout. The condition map uses std 1/sqrt(k).

    Returns:
        numpy.ndarray: the flat parameter vector
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for idx, layer in enumerate(net.hidden_layers):
            gain = 1.0 if idx == 0 else silu_gain()
            std = gain / math.sqrt(layer.in_features)
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen, dtype=DTYPE) * std)
            layer.bias.zero_()
        if net.cond_layer is not None:
            std = 1.0 / math.sqrt(net.cond_layer.in_features)
            net.cond_layer.weight.copy_(torch.randn(net.cond_layer.weight.shape, generator=gen, dtype=DTYPE) * std)
        net.out_layer.weight.zero_()
        net.out_layer.bias.zero_()
    return params_get(net)


def net_build(cfg: NetConfig, seed: int = 0) -> DenoiserNet:
    net = DenoiserNet(cfg)
    init_params(seed, net)
    return net


def params_get(net: DenoiserNet) -> np.ndarray:
    return parameters_to_vector(net.parameters()).detach().numpy().copy()


def params_set(net: DenoiserNet, theta):
    theta = torch.as_tensor(np.asarray(theta, dtype=np.float64))
    if theta.numel() != net.cfg.param_count:
        raise ValueError(f"Parameter vector has {theta.numel()} entries, network needs {net.cfg.param_count}")
    with torch.no_grad():
        vector_to_parameters(theta, net.parameters())


###############################################################################
###############################################################################
def _as_tensor(value, dtype=DTYPE):
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=dtype)


def _cond_tensor(net: DenoiserNet, cond, batch_shape):
    if not net.cfg.cond_dim:
        return None
    if cond is None:
        return torch.zeros(batch_shape + (net.cfg.cond_dim,), dtype=DTYPE)
    return torch.broadcast_to(_as_tensor(cond), batch_shape + (net.cfg.cond_dim,))


def forward(net: DenoiserNet, x, sigma, cond=None) -> np.ndarray:
    '''Numpy-in, numpy-out evaluation in eval mode (no dropout).'''
    x_t = _as_tensor(x)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out = net(x_t, _as_tensor(sigma), _cond_tensor(net, cond, tuple(x_t.shape[:-1])))
    finally:
        net.train(was_training)
    return out.numpy()


def net_denoiser_fn(net: DenoiserNet):
    '''Expose the network as a numpy denoiser (x, sigma, cond) -> D.'''
    def denoise(x, sigma, cond=None):
        return forward(net, x, sigma, cond)
    return denoise


def loss_and_grad(net: DenoiserNet, x_in, target, sigma, cond, weight):
    """
    loss = mean_b weight_b * ||D(x_in_b; sigma_b, cond_b) - target_b||^2, with
    gradients accumulated into the parameters' .grad (previous values replaced).

    Returns:
        tuple: (loss as float, flat gradient as numpy array)

    Raises:
        NumericalFailureError: a per-sample loss is not finite; carries its batch index.
    """
    x_t = _as_tensor(x_in)
    if x_t.ndim != 2 or x_t.shape[0] < 1:
        raise ValueError(f"Expected a nonempty (B, d) batch, got shape {tuple(x_t.shape)}")
    net.zero_grad(set_to_none=False)
    out = net(x_t, _as_tensor(sigma), _cond_tensor(net, cond, (x_t.shape[0],)))
    per_sample = _as_tensor(weight) * torch.sum((out - _as_tensor(target)) ** 2, dim=-1)
    bad = ~torch.isfinite(per_sample)
    if torch.any(bad):
        idx = int(torch.nonzero(bad)[0, 0])
        raise NumericalFailureError(f"Non-finite loss at batch index {idx}", index=idx)
    loss = per_sample.mean()
    loss.backward()
    grad = parameters_to_vector(p.grad for p in net.parameters()).detach().numpy().copy()
    return float(loss.detach()), grad


###############################################################################
###############################################################################
def ema_beta(halflife: float) -> float:
    '''Per-step decay so a parameter's weight halves every `halflife` steps.'''
    if not halflife > 0:
        raise ValueError(f"EMA halflife must be positive: {halflife!r}")
    return 0.5 ** (1.0 / halflife)


def ema_update(ema, theta, beta: float):
    return beta * ema + (1.0 - beta) * theta


@dataclass
class Checkpoint:
    cfg: NetConfig
    step: int
    theta: np.ndarray = field(repr=False)
    ema: np.ndarray = field(repr=False)
    adam_m: np.ndarray = field(repr=False)
    adam_v: np.ndarray = field(repr=False)
    adam_step: int = 0


def adam_state_get(optimizer: torch.optim.Adam, net: DenoiserNet):
    '''Flatten Adam moments in parameter order; missing state (no step yet) reads as zeros.'''
    list_m, list_v, step = [], [], 0
    for p in net.parameters():
        state = optimizer.state.get(p, {})
        if state:
            list_m.append(state['exp_avg'].reshape(-1))
            list_v.append(state['exp_avg_sq'].reshape(-1))
            step = int(state['step'])
        else:
            list_m.append(torch.zeros(p.numel(), dtype=DTYPE))
            list_v.append(torch.zeros(p.numel(), dtype=DTYPE))
    return torch.cat(list_m).numpy().copy(), torch.cat(list_v).numpy().copy(), step


def adam_state_set(optimizer: torch.optim.Adam, net: DenoiserNet, adam_m, adam_v, step: int):
    if step == 0:
        return
    offset = 0
    for p in net.parameters():
        count = p.numel()
        optimizer.state[p] = {
            'step': torch.tensor(float(step)),
            'exp_avg': _as_tensor(adam_m[offset:offset + count]).reshape(p.shape).clone(),
            'exp_avg_sq': _as_tensor(adam_v[offset:offset + count]).reshape(p.shape).clone(),
        }
        offset += count


def checkpoint_save(path, ckpt: Checkpoint):
    """
    Little-endian layout:
        8s magic 'SAUGCKPT' | u32 version | u32 json length | json NetConfig
        u64 step | u64 P | P f64 theta | P f64 ema | P f64 adam m | P f64 adam v
        u64 adam step
    Written to a sibling temp file, then renamed into place.
    """
    cfg_json = ckpt.cfg.to_json().encode('utf-8')
    count = ckpt.cfg.param_count
    arrays = [ckpt.theta, ckpt.ema, ckpt.adam_m, ckpt.adam_v]
    for arr in arrays:
        if np.asarray(arr).size != count:
            raise ValueError(f"Checkpoint array has {np.asarray(arr).size} entries, expected {count}")

    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack('<II', CKPT_VERSION, len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack('<QQ', int(ckpt.step), count))
        for arr in arrays:
            fh.write(np.asarray(arr, dtype='<f8').tobytes())
        fh.write(struct.pack('<Q', int(ckpt.adam_step)))
    os.replace(tmp, path)
    return path


def checkpoint_load(path) -> Checkpoint:
    path = pathlib.Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:8]!r})")
    version, json_len = struct.unpack_from('<II', blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    cfg = NetConfig.from_json(blob[offset:offset + json_len].decode('utf-8'))
    offset += json_len
    step, count = struct.unpack_from('<QQ', blob, offset)
    offset += 16
    if count != cfg.param_count:
        raise ValueError(f"{path}: parameter count {count} does not match config ({cfg.param_count})")
    expected = offset + 4 * 8 * count + 8
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated or oversized checkpoint ({len(blob)} bytes, expected {expected})")
    arrays = []
    for _idx in range(4):
        arrays.append(np.frombuffer(blob, dtype='<f8', count=count, offset=offset).astype(np.float64))
        offset += 8 * count
    (adam_step,) = struct.unpack_from('<Q', blob, offset)
    return Checkpoint(cfg, int(step), *arrays, adam_step=int(adam_step))


def net_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True) -> DenoiserNet:
    net = DenoiserNet(ckpt.cfg)
    params_set(net, ckpt.ema if use_ema else ckpt.theta)
    net.eval()
    return net

