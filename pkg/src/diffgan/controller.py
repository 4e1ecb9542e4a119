"""Generator/discriminator controller that picks the denoising depth per window.

The generator replaces analytic forward noising: it maps a clean window
(plus, by default, a Gaussian noise window) to a noisy window. The
discriminator scores how much that output resembles pure noise, and a
``StepMapper`` turns the probability into an integer step count for the
denoising module.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .diffusion import NoiseSchedule, OptimConfig, TrainedDenoiser, denoise_module, plateaued
from .errors import ConfigurationError, DivergenceError, DomainError
from .nn_core import (LSTM, Activation, Dense, RngStream, adamw_step, backward, clip_grad_norm,
                      init_parameters, parameter_set, sample_gaussian)

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-7
MAPPER_KINDS = ("linear", "schedule")


# ----------------------------------------------------------- step mapper


@dataclass(frozen=True)
class StepMapper:
    """Monotone map from a probability in [0, 1] to a step in {0, ..., N}.

    ``linear`` rounds N*p half-up; ``schedule`` returns the largest n whose
    noise level 1 - alpha_bar[n] does not exceed p (0 if none does).
    """

    kind: str
    N: int
    noise_levels: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in MAPPER_KINDS:
            raise ConfigurationError(f"unknown step mapper {self.kind!r}; expected one of {MAPPER_KINDS}")
        if self.kind == "schedule" and len(self.noise_levels) != self.N:
            raise ConfigurationError("schedule mapper needs one noise level per step")

    @classmethod
    def from_schedule(cls, schedule: NoiseSchedule, kind: str = "schedule") -> "StepMapper":
        levels = tuple(float(v) for v in 1.0 - schedule.alpha_bar[1:])
        return cls(kind, schedule.N, levels if kind == "schedule" else ())

    def __call__(self, p):
        arr = np.asarray(p.detach().cpu().numpy() if isinstance(p, torch.Tensor) else p, dtype=np.float64)
        if np.isnan(arr).any() or (arr < 0).any() or (arr > 1).any():
            raise DomainError("step mapper input must lie in [0, 1]")
        if self.kind == "linear":
            out = np.floor(self.N * arr + 0.5).astype(np.int64)
        else:
            out = np.searchsorted(np.asarray(self.noise_levels), arr, side="right").astype(np.int64)
        return int(out) if out.ndim == 0 else out

    def threshold(self, k: int) -> float:
        """Smallest probability that maps to step ``k``."""
        if k <= 0:
            return 0.0
        if self.kind == "linear":
            return (k - 0.5) / self.N
        return self.noise_levels[k - 1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "N": self.N, "noise_levels": list(self.noise_levels)}

    @classmethod
    def from_dict(cls, d: dict) -> "StepMapper":
        return cls(d["kind"], d["N"], tuple(d.get("noise_levels", ())))


def map_step(p, mapper: StepMapper):
    return mapper(p)


# ------------------------------------------------------------- networks


@dataclass
class GeneratorConfig:
    window: int = 64
    channels: int = 5
    hidden: int = 32
    layers: int = 1
    noise_input: bool = True
    init_noise_level: float | None = 0.5


class LSTMGenerator(nn.Module):
    """Sequence-to-sequence LSTM with a per-timestep linear skip path."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        fin = cfg.channels * (2 if cfg.noise_input else 1)
        self.lstm = LSTM(fin, cfg.hidden, cfg.layers, name="generator.lstm")
        self.head = Dense(cfg.hidden, cfg.channels, name="generator.head")
        self.skip = Dense(fin, cfg.channels, name="generator.skip")

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 3 or x.shape[2] != self.cfg.channels:
            raise ConfigurationError(
                f"layer 'generator': expected input [B, w, {self.cfg.channels}], got {tuple(x.shape)}")
        if self.cfg.noise_input:
            if noise is None or noise.shape != x.shape:
                raise ConfigurationError("generator: noise input of the window's shape is required")
            x = torch.cat([x, noise], dim=2)
        return self.head(self.lstm(x)) + self.skip(x)


@dataclass
class DiscriminatorConfig:
    window: int = 64
    channels: int = 5
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "silu"
    logit_bound: float = 16.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


class MLPDiscriminator(nn.Module):
    """Flattened-window MLP returning a clamped logit of "this is pure noise"."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        sizes = [cfg.window * cfg.channels, *cfg.hidden]
        self.hidden = nn.ModuleList(Dense(a, b, name=f"discriminator.fc{i}")
                                    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])))
        self.act = Activation(cfg.activation)
        self.out = Dense(sizes[-1], 1, name="discriminator.out")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1:] != (self.cfg.window, self.cfg.channels):
            raise ConfigurationError(
                f"layer 'discriminator': expected input [B, {self.cfg.window}, {self.cfg.channels}], "
                f"got {tuple(x.shape)}")
        h = x.reshape(len(x), -1)
        for layer in self.hidden:
            h = self.act(layer(h))
        b = self.cfg.logit_bound
        return self.out(h).squeeze(1).clamp(-b, b)

    def prob(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(x))


def build_generator(cfg: GeneratorConfig, rng: RngStream) -> LSTMGenerator:
    """Random init; with ``init_noise_level`` set (and noise input on) the skip
    path starts as forward noising sqrt(1-v) x + sqrt(v) eps and the LSTM head at zero."""
    g = LSTMGenerator(cfg)
    init_parameters(g, rng.torch)
    v = cfg.init_noise_level
    if v is not None and cfg.noise_input:
        if not 0 <= v <= 1:
            raise ConfigurationError(f"init_noise_level must lie in [0, 1], got {v}")
        eye = torch.eye(cfg.channels)
        with torch.no_grad():
            g.skip.linear.weight.copy_(torch.cat([math.sqrt(1 - v) * eye, math.sqrt(v) * eye], dim=1))
            g.head.linear.weight.zero_()
    return g


def build_discriminator(cfg: DiscriminatorConfig, rng: RngStream) -> MLPDiscriminator:
    d = MLPDiscriminator(cfg)
    init_parameters(d, rng.torch)
    return d


# ---------------------------------------------------------------- losses


def _log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp_min(LOG_FLOOR))


def discriminator_objective(p_fake: torch.Tensor, p_noise: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * mean[log D(G(W)) + log(1 - D(z))], minimised by the discriminator."""
    return lam * (_log(p_fake) + _log(1 - p_noise)).mean()


def generator_objective(p_fake: torch.Tensor, p_noise: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * mean[log D(z) + log(1 - D(G(W)))], minimised by the generator."""
    return lam * (_log(p_noise) + _log(1 - p_fake)).mean()


def adversarial_losses(generator, discriminator, batch: torch.Tensor, z: torch.Tensor, lam: float = 0.7,
                       gen_noise: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator term, discriminator term) for one batch and one noise draw."""
    if z.shape != batch.shape:
        raise ConfigurationError(f"noise batch {tuple(z.shape)} must match window batch {tuple(batch.shape)}")
    p_fake = discriminator.prob(generator(batch, gen_noise))
    p_noise = discriminator.prob(z)
    return generator_objective(p_fake, p_noise, lam), discriminator_objective(p_fake, p_noise, lam)


def reconstruction_error(batch: torch.Tensor, recon: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Per-window squared error, shape [B]: squared norm (``sum``) or per-element ``mean``."""
    sq = (batch - recon).pow(2)
    if reduction == "sum":
        return sq.sum(dim=(1, 2))
    if reduction == "mean":
        return sq.mean(dim=(1, 2))
    raise ConfigurationError(f"unknown reconstruction reduction {reduction!r}")


def reconstruction_loss(batch: torch.Tensor, generated: torch.Tensor, discriminator, mapper: StepMapper,
                        denoiser, rng: RngStream | None = None,
                        variant: str = "ddpm") -> tuple[torch.Tensor, np.ndarray]:
    """Mean squared error between windows and M(G(W), f(D(G(W)))).

    The step mapping is integer-valued, so no gradient reaches the
    discriminator through it; gradients do reach the generator through the
    frozen denoiser. Returns the loss and the per-window steps.
    """
    with torch.no_grad():
        steps = mapper(discriminator.prob(generated))
    recon = denoise_module(generated, torch.as_tensor(steps), denoiser, rng, variant)
    return reconstruction_error(batch, recon).mean(), steps


# ---------------------------------------------------------------- models


@dataclass
class GanModels:
    generator: LSTMGenerator
    discriminator: MLPDiscriminator
    mapper: StepMapper

    def generate(self, windows: torch.Tensor, rng: RngStream | None) -> torch.Tensor:
        noise = None
        if self.generator.cfg.noise_input:
            noise = sample_gaussian(rng, windows.shape, windows.dtype)
        return self.generator(windows, noise)

    def steps(self, generated: torch.Tensor) -> np.ndarray:
        return self.mapper(self.discriminator.prob(generated))


def diffgan_reconstruct(windows: torch.Tensor, models: GanModels, denoiser, rng: RngStream,
                        variant: str = "ddpm") -> tuple[torch.Tensor, np.ndarray]:
    """M(G(W), f(D(G(W)))) for a window batch; returns reconstructions and steps."""
    generated = models.generate(windows, rng.spawn("generator"))
    steps = models.steps(generated)
    recon = denoise_module(generated, torch.as_tensor(steps), denoiser, rng.spawn("sampler"), variant)
    return recon, steps


# -------------------------------------------------------------- training


@dataclass
class GanTrainConfig:
    lam: float = 0.7
    variant: str = "ddpm"
    straight_through: bool = False
    optim_g: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-4, batch_size=32, max_epochs=5,
                                                                       patience=0))
    optim_d: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-4, batch_size=32, max_epochs=5,
                                                                       patience=0))
    recon_reduction: str = "sum"
    collapse_var: float = 1e-6
    collapse_iters: int = 100

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigurationError(f"adversarial weight must be positive, got {self.lam}")


def _straight_through_term(p_fake, batch, generated, steps, mapper, denoiser, rng, variant):
    """Finite-difference surrogate gradient of the reconstruction loss w.r.t. p."""
    with torch.no_grad():
        up = np.minimum(steps + 1, mapper.N)
        l0 = reconstruction_error(batch, denoise_module(generated, torch.as_tensor(steps), denoiser, rng, variant))
        l1 = reconstruction_error(batch, denoise_module(generated, torch.as_tensor(up), denoiser, rng, variant))
        dp = np.array([max(mapper.threshold(int(u)) - mapper.threshold(int(s)), 1e-6) if u > s else 1.0
                       for s, u in zip(steps, up)])
        slope = (l1 - l0) / torch.as_tensor(dp, dtype=l0.dtype)
    return ((p_fake - p_fake.detach()) * slope).mean()


def train_gan(windows, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, denoiser: TrainedDenoiser,
              mapper: StepMapper, cfg: GanTrainConfig, seed: int) -> tuple[GanModels, list[dict]]:
    """Alternating discriminator/generator updates with a frozen denoiser.

    Per batch: draw z, take one AdamW step for the discriminator on its
    adversarial objective, then one for the generator on its adversarial
    objective plus the reconstruction loss. History rows are per epoch.
    """
    data = torch.as_tensor(getattr(windows, "windows", windows), dtype=torch.float32)
    if len(data) == 0:
        raise ConfigurationError("train_gan: empty window set")
    rng = RngStream(seed, ("gan",))
    models = GanModels(build_generator(gen_cfg, rng.spawn("init_g")),
                       build_discriminator(disc_cfg, rng.spawn("init_d")), mapper)
    r_shuffle, r_z, r_gen, r_sampler = (rng.spawn(s) for s in ("shuffle", "z", "generator", "sampler"))
    g_params, d_params = parameter_set(models.generator), parameter_set(models.discriminator)
    g_state, d_state = cfg.optim_g.adamw_state(), cfg.optim_d.adamw_state()
    m = min(cfg.optim_g.batch_size, len(data))

    frozen = [(p, p.requires_grad) for p in denoiser.net.parameters()]
    for p, _ in frozen:
        p.requires_grad_(False)
    history, recon_hist = [], []
    flat_iters, warned, it = 0, False, 0
    try:
        for epoch in range(cfg.optim_g.max_epochs):
            order = r_shuffle.numpy.permutation(len(data))
            sums = dict(adv_d=0.0, adv_g=0.0, recon=0.0, step=0.0, p_fake=0.0)
            batches = 0
            step_counts = []
            for start in range(0, len(order), m):
                batch = data[torch.as_tensor(order[start:start + m])]
                z = sample_gaussian(r_z, batch.shape)
                generated = models.generate(batch, r_gen)

                # discriminator update
                p_fake = models.discriminator.prob(generated.detach())
                p_noise = models.discriminator.prob(z)
                adv_d = discriminator_objective(p_fake, p_noise, cfg.lam)
                d_loss = adv_d
                if cfg.straight_through:
                    steps = mapper(p_fake.detach())
                    d_loss = d_loss + _straight_through_term(p_fake, batch, generated.detach(), steps, mapper,
                                                             denoiser, r_sampler.spawn(f"st{it}"), cfg.variant)
                if not torch.isfinite(d_loss):
                    raise DivergenceError("discriminator loss is not finite", it)
                grads, _ = clip_grad_norm(backward(d_loss, d_params), cfg.optim_d.clip_norm)
                adamw_step(d_params, grads, d_state)

                # generator update against the refreshed discriminator
                p_fake = models.discriminator.prob(generated)
                p_noise = models.discriminator.prob(z)
                steps = mapper(p_fake.detach())
                recon = denoise_module(generated, torch.as_tensor(steps), denoiser, r_sampler, cfg.variant)
                r_loss = reconstruction_error(batch, recon, cfg.recon_reduction).mean()
                adv_g = generator_objective(p_fake, p_noise, cfg.lam)
                g_loss = adv_g + r_loss
                if not torch.isfinite(g_loss):
                    raise DivergenceError("generator loss is not finite", it)
                grads, _ = clip_grad_norm(backward(g_loss, g_params), cfg.optim_g.clip_norm)
                adamw_step(g_params, grads, g_state)

                flat = len(p_fake) > 1 and float(p_fake.detach().var()) < cfg.collapse_var
                flat_iters = flat_iters + 1 if flat else 0
                if flat_iters >= cfg.collapse_iters and not warned:
                    warnings.warn(f"possible mode collapse: discriminator output variance below "
                                  f"{cfg.collapse_var} for {flat_iters} iterations", RuntimeWarning)
                    warned = True
                sums["adv_d"] += float(adv_d.detach())
                sums["adv_g"] += float(adv_g.detach())
                sums["recon"] += float(r_loss.detach())
                sums["step"] += float(np.mean(steps))
                sums["p_fake"] += float(p_fake.detach().mean())
                step_counts.append(steps)
                batches += 1
                it += 1
            row = {"epoch": epoch + 1, **{k: v / batches for k, v in sums.items()}}
            history.append(row)
            recon_hist.append(row["recon"])
            log.info("gan epoch %d adv_d %.4f adv_g %.4f recon %.5f mean step %.1f", epoch + 1,
                     row["adv_d"], row["adv_g"], row["recon"], row["step"])
            if plateaued(recon_hist, cfg.optim_g.patience, cfg.optim_g.min_improvement):
                break
    finally:
        for p, flag in frozen:
            p.requires_grad_(flag)
    models.generator.eval()
    models.discriminator.eval()
    return models, history


def gan_meta(models: GanModels) -> dict:
    return {"generator": asdict(models.generator.cfg),
            "discriminator": {**asdict(models.discriminator.cfg),
                              "hidden": list(models.discriminator.cfg.hidden)},
            "mapper": models.mapper.to_dict()}


def gan_from_arrays(arrays: dict, meta: dict) -> GanModels:
    g = LSTMGenerator(GeneratorConfig(**meta["generator"]))
    d = MLPDiscriminator(DiscriminatorConfig(**meta["discriminator"]))
    for net, prefix in ((g, "generator/"), (d, "discriminator/")):
        net.load_state_dict({k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items()
                             if k.startswith(prefix)})
        net.eval()
    return GanModels(g, d, StepMapper.from_dict(meta["mapper"]))
