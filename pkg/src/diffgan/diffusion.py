"""Noise schedule, forward noising, the U-Net noise predictor and reverse denoising.

Windows are laid out ``[batch, w, D]`` (time-major, like the raw series);
the U-Net transposes to ``[batch, D, w]`` internally. Step indices follow
the 1..N convention, with step 0 meaning "no noise".
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DivergenceError, ScheduleError, StepRangeError
from .nn_core import (Activation, AdamWState, Concat, Conv1d, ConvTranspose1d, Dense, GroupNorm,
                      ResidualAdd, RngStream, TimestepEmbedding, adamw_step, backward,
                      clip_grad_norm, init_parameters, parameter_set, sample_gaussian)

log = logging.getLogger(__name__)


# -------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants, stored with a leading index-0 entry.

    ``alpha[0] = alpha_bar[0] = 1`` and ``sigma[0] = 0`` so that the arrays
    can be indexed directly by step number.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ScheduleError("schedule needs at least one step")
        if not ((betas > 0) & (betas < 1)).all():
            raise ScheduleError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)

    @property
    def N(self) -> int:
        return len(self.betas)

    @property
    def alpha(self) -> np.ndarray:
        return np.concatenate([[1.0], 1.0 - self.betas])

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    @property
    def sigma(self) -> np.ndarray:
        a, ab = self.alpha, self.alpha_bar
        out = np.zeros(self.N + 1)
        out[1:] = np.sqrt((1 - a[1:]) * (1 - ab[:-1]) / (1 - ab[1:]))
        return out

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.asarray(d["betas"]))


def default_beta_range(N: int) -> tuple[float, float]:
    """The 1000-step DDPM endpoints (1e-4, 0.02) rescaled to N steps.

    For N < 50 the rescaled end would reach 1, so both ends are capped at 0.999.
    """
    scale = 1000.0 / N
    return min(1e-4 * scale, 0.999), min(0.02 * scale, 0.999)


def build_schedule(N: int = 100, beta_start: float | None = None, beta_end: float | None = None,
                   shape: str = "linear", max_alpha_bar: float | None = 0.05) -> NoiseSchedule:
    """Linear or cosine beta schedule.

    ``max_alpha_bar`` bounds the final cumulative signal level; pass ``None``
    to accept a deliberately weak schedule (e.g. for worked examples). The
    cosine shape ignores ``beta_start``/``beta_end`` apart from clipping at
    0.999.
    """
    if N < 1:
        raise ScheduleError(f"N must be >= 1, got {N}")
    if beta_start is None or beta_end is None:
        d0, d1 = default_beta_range(N)
        beta_start = d0 if beta_start is None else beta_start
        beta_end = d1 if beta_end is None else beta_end
    if shape == "linear":
        if not 0 < beta_start <= beta_end < 1:
            raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, N)
    elif shape == "cosine":
        s = 0.008
        t = np.arange(N + 1) / N
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ScheduleError(f"unknown schedule shape {shape!r}")
    schedule = NoiseSchedule(betas)
    final = schedule.alpha_bar[-1]
    if max_alpha_bar is not None and final > max_alpha_bar:
        raise ScheduleError(
            f"schedule too weak: alpha_bar[N] = {final:.4f} > {max_alpha_bar}; "
            "increase beta_end or N")
    return schedule


def _steps_tensor(n, batch: int, lo: int, hi: int) -> torch.Tensor:
    steps = torch.as_tensor(n, dtype=torch.long)
    if steps.dim() == 0:
        steps = steps.expand(batch)
    if steps.shape != (batch,):
        raise StepRangeError(f"expected one step per sample ({batch}), got shape {tuple(steps.shape)}")
    if batch and (int(steps.min()) < lo or int(steps.max()) > hi):
        raise StepRangeError(f"step out of range [{lo}, {hi}]: got {steps.min().item()}..{steps.max().item()}")
    return steps


def _gather(values: np.ndarray, steps: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.as_tensor(values, dtype=like.dtype)[steps]
    return out.reshape((-1,) + (1,) * (like.dim() - 1))


def forward_sample(x0: torch.Tensor, n, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Direct sample from q(x_n | x_0): sqrt(ab_n) x0 + sqrt(1 - ab_n) eps."""
    if eps.shape != x0.shape:
        raise ConfigurationError(f"noise shape {tuple(eps.shape)} differs from data shape {tuple(x0.shape)}")
    steps = _steps_tensor(n, x0.shape[0], 1, schedule.N)
    ab = _gather(schedule.alpha_bar, steps, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


# ----------------------------------------------------------------- U-Net


@dataclass
class DenoiserConfig:
    window: int = 64
    channels: int = 5
    depth: int = 2
    width: int = 16
    emb_dim: int = 32
    groups: int = 4
    activation: str = "silu"

    def __post_init__(self):
        if self.window % (2 ** self.depth):
            raise ConfigurationError(
                f"window {self.window} not divisible by 2**depth = {2 ** self.depth}")
        if self.width % self.groups:
            raise ConfigurationError(f"width {self.width} not divisible by groups {self.groups}")

    def level_width(self, level: int) -> int:
        return self.width * min(2 ** level, 4)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, cfg: DenoiserConfig, name: str):
        super().__init__()
        self.norm1 = GroupNorm(cfg.groups, cin, name=f"{name}.norm1")
        self.conv1 = Conv1d(cin, cout, 3, name=f"{name}.conv1")
        self.temb = Dense(cfg.emb_dim, cout, name=f"{name}.temb")
        self.norm2 = GroupNorm(cfg.groups, cout, name=f"{name}.norm2")
        self.conv2 = Conv1d(cout, cout, 3, name=f"{name}.conv2")
        self.act = Activation(cfg.activation)
        self.skip = Conv1d(cin, cout, 1, name=f"{name}.skip") if cin != cout else None
        self.add = ResidualAdd(name=f"{name}.add")

    def forward(self, x, emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.add(h, x if self.skip is None else self.skip(x))


class UNet1d(nn.Module):
    """Encoder-decoder noise predictor with skip connections and step conditioning."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = TimestepEmbedding(cfg.emb_dim)
        self.emb1 = Dense(cfg.emb_dim, cfg.emb_dim, name="emb1")
        self.emb2 = Dense(cfg.emb_dim, cfg.emb_dim, name="emb2")
        self.act = Activation(cfg.activation)
        self.inp = Conv1d(cfg.channels, cfg.width, 3, name="inp")
        self.down_blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = cfg.width
        skips = []
        for i in range(cfg.depth):
            out = cfg.level_width(i)
            self.down_blocks.append(ResBlock(ch, out, cfg, f"down{i}"))
            self.downsample.append(Conv1d(out, out, 3, stride=2, name=f"downsample{i}"))
            skips.append(out)
            ch = out
        self.mid = ResBlock(ch, ch, cfg, "mid")
        self.upsample = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.concat = Concat()
        for i in reversed(range(cfg.depth)):
            self.upsample.append(ConvTranspose1d(ch, ch, name=f"upsample{i}"))
            out = skips[i]
            self.up_blocks.append(ResBlock(ch + out, out, cfg, f"up{i}"))
            ch = out
        self.out_norm = GroupNorm(cfg.groups, ch, name="out_norm")
        self.out = Conv1d(ch, cfg.channels, 3, name="out")

    def forward(self, x: torch.Tensor, steps: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1:] != (self.cfg.window, self.cfg.channels):
            raise ConfigurationError(
                f"layer 'unet': expected input [B, {self.cfg.window}, {self.cfg.channels}], got {tuple(x.shape)}")
        emb = self.emb2(self.act(self.emb1(self.embed(steps).to(x.dtype))))
        h = self.inp(x.transpose(1, 2))
        skips = []
        for block, down in zip(self.down_blocks, self.downsample):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for up, block in zip(self.upsample, self.up_blocks):
            h = block(self.concat(up(h), skips.pop()), emb)
        return self.out(self.act(self.out_norm(h))).transpose(1, 2)


def build_unet(cfg: DenoiserConfig, rng: RngStream) -> UNet1d:
    net = UNet1d(cfg)
    init_parameters(net, rng.torch)
    # zero output projection: the untrained predictor returns eps_hat = 0
    with torch.no_grad():
        net.out.conv.weight.zero_()
    return net


@dataclass
class TrainedDenoiser:
    config: DenoiserConfig
    net: UNet1d
    schedule: NoiseSchedule

    def __call__(self, x: torch.Tensor, steps) -> torch.Tensor:
        steps = _steps_tensor(steps, x.shape[0], 1, self.schedule.N)
        return self.net(x, steps)

    def params(self) -> dict[str, torch.Tensor]:
        return parameter_set(self.net)


# -------------------------------------------------------------- training


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 40
    patience: int = 10
    min_improvement: float = 0.01
    clip_norm: float = 1.0

    def adamw_state(self) -> AdamWState:
        return AdamWState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                          weight_decay=self.weight_decay)


def plateaued(history: list[float], patience: int, min_improvement: float) -> bool:
    """True when the best of the last ``patience`` epochs is < min_improvement better than before."""
    if patience <= 0 or len(history) <= patience:
        return False
    before = min(history[:-patience])
    recent = min(history[-patience:])
    return recent > (1.0 - min_improvement) * before


def denoiser_loss(denoiser, batch: torch.Tensor, steps, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the injected noise and its prediction."""
    x_n = forward_sample(batch, steps, eps, denoiser.schedule)
    return (eps - denoiser(x_n, steps)).pow(2).mean()


def train_denoiser(windows, config: DenoiserConfig, schedule: NoiseSchedule, optim: OptimConfig,
                   seed: int, per_sample_steps: bool = True) -> tuple[TrainedDenoiser, list[dict]]:
    """Fit the noise predictor on clean windows; returns the model and per-epoch history.

    With ``per_sample_steps=False`` one step index is shared by the whole
    batch; the default draws an independent step per window, which targets
    the same objective with lower gradient variance.
    """
    data = torch.as_tensor(getattr(windows, "windows", windows), dtype=torch.float32)
    if len(data) == 0:
        raise ConfigurationError("train_denoiser: empty window set")
    m = min(optim.batch_size, len(data))
    rng = RngStream(seed, ("denoiser",))
    r_init, r_shuffle, r_noise, r_steps = (rng.spawn(s) for s in ("init", "shuffle", "noise", "steps"))
    denoiser = TrainedDenoiser(config, build_unet(config, r_init), schedule)
    params = denoiser.params()
    state = optim.adamw_state()
    history, losses = [], []
    it = 0
    for epoch in range(optim.max_epochs):
        order = r_shuffle.numpy.permutation(len(data))
        total, batches = 0.0, 0
        for start in range(0, len(order), m):
            batch = data[torch.as_tensor(order[start:start + m])]
            size = (len(batch),) if per_sample_steps else (1,)
            steps = torch.randint(1, schedule.N + 1, size, generator=r_steps.torch)
            if not per_sample_steps:
                steps = steps.expand(len(batch))
            eps = sample_gaussian(r_noise, batch.shape)
            loss = denoiser_loss(denoiser, batch, steps, eps)
            if not torch.isfinite(loss):
                raise DivergenceError("denoiser loss is not finite", it)
            grads, _ = clip_grad_norm(backward(loss, params), optim.clip_norm)
            adamw_step(params, grads, state)
            total += float(loss.detach())
            batches += 1
            it += 1
        losses.append(total / batches)
        history.append({"epoch": epoch + 1, "loss": losses[-1]})
        log.info("denoiser epoch %d loss %.5f", epoch + 1, losses[-1])
        if plateaued(losses, optim.patience, optim.min_improvement):
            break
    denoiser.net.eval()
    return denoiser, history


# ------------------------------------------------------------- denoising

VARIANTS = ("ddpm", "ddim", "single")


def _ddpm_mean(x, eps_hat, k: int, schedule: NoiseSchedule):
    a, ab = schedule.alpha[k], schedule.alpha_bar[k]
    return (x - ((1 - a) / math.sqrt(1 - ab)) * eps_hat) / math.sqrt(a)


def denoise_step(x_n: torch.Tensor, n: int, denoiser, rng: RngStream | None = None,
                 z: torch.Tensor | None = None) -> torch.Tensor:
    """One reverse step x_n -> x_{n-1}.

    The noise term sigma_n z is added for n >= 2; ``z`` defaults to a draw
    from ``rng``, or to zero when neither is given.
    """
    schedule = denoiser.schedule
    if not 1 <= n <= schedule.N:
        raise StepRangeError(f"step {n} outside [1, {schedule.N}]")
    mean = _ddpm_mean(x_n, denoiser(x_n, n), n, schedule)
    if n == 1:
        return mean
    if z is None and rng is not None:
        z = sample_gaussian(rng, x_n.shape, x_n.dtype)
    return mean if z is None else mean + schedule.sigma[n] * z


def denoise_module(x_n: torch.Tensor, n, denoiser, rng: RngStream | None = None,
                   variant: str = "ddpm") -> torch.Tensor:
    """Reconstruct x_0 from x_n; ``n`` may be an int or one step per sample.

    ``ddpm`` composes reverse steps n..1 (noise from ``rng``; none when
    ``rng`` is None), ``ddim`` iterates the deterministic implicit update and
    ``single`` estimates x_0 in one shot. Samples with n = 0 are returned
    unchanged. Gradients flow through the predictor.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown denoising variant {variant!r}")
    schedule = denoiser.schedule
    steps = _steps_tensor(n, x_n.shape[0], 0, schedule.N)
    if len(steps) == 0 or int(steps.max()) == 0:
        return x_n
    ab = schedule.alpha_bar
    if variant == "single":
        live = torch.nonzero(steps > 0).squeeze(1)
        xs, ks = x_n[live], steps[live]
        c = _gather(ab, ks, xs)
        x0 = (xs - (1 - c).sqrt() * denoiser(xs, ks)) / c.sqrt()
        return x_n.index_copy(0, live, x0)
    x = x_n
    for k in range(int(steps.max()), 0, -1):
        z = sample_gaussian(rng, x.shape, x.dtype) if (variant == "ddpm" and rng is not None and k > 1) else None
        live = torch.nonzero(steps >= k).squeeze(1)
        xs = x[live]
        eps_hat = denoiser(xs, k)
        if variant == "ddpm":
            upd = _ddpm_mean(xs, eps_hat, k, schedule)
            if z is not None:
                upd = upd + schedule.sigma[k] * z[live]
        else:
            x0 = (xs - math.sqrt(1 - ab[k]) * eps_hat) / math.sqrt(ab[k])
            upd = math.sqrt(ab[k - 1]) * x0 + math.sqrt(1 - ab[k - 1]) * eps_hat
        x = upd if len(live) == len(x) else x.index_copy(0, live, upd)
    return x


def partial_diffusion_reconstruct(x0: torch.Tensor, steps: int, denoiser, rng: RngStream,
                                  variant: str = "ddpm") -> torch.Tensor:
    """Fixed-step baseline: noise to ``steps`` with fresh Gaussian noise, then denoise.

    Data noise and sampler noise come from separate substreams of ``rng``.
    """
    N = denoiser.schedule.N
    if not 1 <= steps <= N:
        raise StepRangeError(f"diffusion steps {steps} outside [1, {N}]")
    eps = sample_gaussian(rng.spawn("forward"), x0.shape, x0.dtype)
    x_n = forward_sample(x0, steps, eps, denoiser.schedule)
    return denoise_module(x_n, steps, denoiser, rng.spawn("sampler"), variant)


def denoiser_meta(denoiser: TrainedDenoiser) -> dict:
    return {"config": asdict(denoiser.config), "schedule": denoiser.schedule.to_dict()}


def denoiser_from_arrays(arrays: dict, meta: dict, prefix: str = "") -> TrainedDenoiser:
    cfg = DenoiserConfig(**meta["config"])
    net = UNet1d(cfg)
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    net.load_state_dict(state)
    net.eval()
    return TrainedDenoiser(cfg, net, NoiseSchedule.from_dict(meta["schedule"]))
