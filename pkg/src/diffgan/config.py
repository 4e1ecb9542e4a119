"""Experiment configuration: sectioned ``key = value`` files with typed defaults.

Every field has a default. ``scale`` selects a preset (series length and
epoch counts) that the file and command-line flags then override.
"""

from __future__ import annotations

import configparser
import io
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .controller import DiscriminatorConfig, GanTrainConfig, GeneratorConfig
from .data import ANOMALY_KINDS
from .diffusion import DenoiserConfig, OptimConfig
from .errors import ConfigurationError

SCALES = ("desk", "paper")


@dataclass
class ExperimentSection:
    seed: int = 0
    scale: str = "paper"
    out: str = "runs"


@dataclass
class DataSection:
    path: str = ""                       # CSV to use instead of generated data (single dataset)
    kinds: tuple[str, ...] = ANOMALY_KINDS
    timesteps: int = 50_000
    dims: int = 5
    ratio: float = 0.05
    noise_std: float = 0.05
    window: int = 64
    stride: int = 1


@dataclass
class ScheduleSection:
    steps: int = 100
    beta_start: float | None = None      # None: 1e-4 * 1000 / steps
    beta_end: float | None = None        # None: 0.02 * 1000 / steps
    shape: str = "linear"


@dataclass
class DenoiserSection:
    depth: int = 2
    width: int = 16
    emb_dim: int = 32
    groups: int = 4
    activation: str = "silu"
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 64
    epochs: int = 40
    patience: int = 10
    min_improvement: float = 0.01
    clip_norm: float = 1.0


@dataclass
class GeneratorSection:
    hidden: int = 32
    layers: int = 1
    noise_input: bool = True
    init_noise_level: float | None = 0.5
    lr: float = 1e-4
    weight_decay: float = 1e-2


@dataclass
class DiscriminatorSection:
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "silu"
    logit_bound: float = 16.0
    lr: float = 1e-4
    weight_decay: float = 1e-2


@dataclass
class GanSection:
    lam: float = 0.7
    mapper: str = "schedule"
    variant: str = "ddpm"
    straight_through: bool = True
    recon_reduction: str = "sum"
    batch_size: int = 32
    epochs: int = 5
    patience: int = 0
    min_improvement: float = 0.01
    clip_norm: float = 1.0


@dataclass
class DetectSection:
    stride: int | None = None            # None: window // 2
    threshold: str = "best_f1"
    quantile: float = 0.99
    aggregate: str = "mean"
    variant: str = "ddpm"
    batch_size: int = 256
    point_adjust: bool = False
    baseline_steps: tuple[int, ...] = (20, 50, 80)
    sweep_steps: tuple[int, ...] = (5, 10, 20, 40, 60, 80, 100)


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = field(default_factory=DiscriminatorSection)
    gan: GanSection = field(default_factory=GanSection)
    detect: DetectSection = field(default_factory=DetectSection)

    def validate(self) -> "ExperimentConfig":
        if self.experiment.scale not in SCALES:
            raise ConfigurationError(f"experiment.scale must be one of {SCALES}")
        bad = [k for k in self.data.kinds if k not in ANOMALY_KINDS]
        if bad or not self.data.kinds:
            raise ConfigurationError(f"data.kinds: unknown or empty {bad}; choose from {ANOMALY_KINDS}")
        if self.data.window < 1 or self.data.stride < 1:
            raise ConfigurationError("data.window and data.stride must be positive")
        if self.detect.stride is not None and self.detect.stride < 1:
            raise ConfigurationError("detect.stride must be positive")
        if self.detect.threshold not in ("best_f1", "quantile"):
            raise ConfigurationError(f"detect.threshold must be best_f1 or quantile, got {self.detect.threshold!r}")
        for m in (*self.detect.baseline_steps, *self.detect.sweep_steps):
            if not 1 <= m <= self.schedule.steps:
                raise ConfigurationError(f"diffusion steps {m} outside [1, {self.schedule.steps}]")
        if self.gan.lam <= 0:
            raise ConfigurationError("gan.lam must be positive")
        return self

    # ------------------------------------------------ derived model configs

    @property
    def detect_stride(self) -> int:
        return self.detect.stride or max(self.data.window // 2, 1)

    def denoiser_config(self, channels: int) -> DenoiserConfig:
        d = self.denoiser
        return DenoiserConfig(window=self.data.window, channels=channels, depth=d.depth, width=d.width,
                              emb_dim=d.emb_dim, groups=d.groups, activation=d.activation)

    def denoiser_optim(self) -> OptimConfig:
        d = self.denoiser
        return OptimConfig(lr=d.lr, weight_decay=d.weight_decay, batch_size=d.batch_size, max_epochs=d.epochs,
                           patience=d.patience, min_improvement=d.min_improvement, clip_norm=d.clip_norm)

    def generator_config(self, channels: int) -> GeneratorConfig:
        g = self.generator
        return GeneratorConfig(window=self.data.window, channels=channels, hidden=g.hidden, layers=g.layers,
                               noise_input=g.noise_input, init_noise_level=g.init_noise_level)

    def discriminator_config(self, channels: int) -> DiscriminatorConfig:
        d = self.discriminator
        return DiscriminatorConfig(window=self.data.window, channels=channels, hidden=d.hidden,
                                   activation=d.activation, logit_bound=d.logit_bound)

    def gan_train_config(self) -> GanTrainConfig:
        g = self.gan

        def opt(lr, wd):
            return OptimConfig(lr=lr, weight_decay=wd, batch_size=g.batch_size, max_epochs=g.epochs,
                               patience=g.patience, min_improvement=g.min_improvement, clip_norm=g.clip_norm)

        return GanTrainConfig(lam=g.lam, variant=g.variant, straight_through=g.straight_through,
                              optim_g=opt(self.generator.lr, self.generator.weight_decay),
                              optim_d=opt(self.discriminator.lr, self.discriminator.weight_decay),
                              recon_reduction=g.recon_reduction)

    def to_dict(self) -> dict:
        return asdict(self)

    def snapshot(self) -> dict:
        """``to_dict`` without the output directory, so checkpoints do not depend on where they are written."""
        d = self.to_dict()
        del d["experiment"]["out"]
        return d


# desk: short series and fewer epochs so a full benchmark fits on a laptop CPU
_PRESETS = {
    "desk": {"data": {"timesteps": 2000}, "denoiser": {"epochs": 30}, "gan": {"epochs": 3}},
    "paper": {},
}


def preset(scale: str = "paper") -> ExperimentConfig:
    if scale not in SCALES:
        raise ConfigurationError(f"unknown scale {scale!r}; expected one of {SCALES}")
    cfg = ExperimentConfig()
    cfg.experiment.scale = scale
    for section, values in _PRESETS[scale].items():
        setattr(cfg, section, replace(getattr(cfg, section), **values))
    return cfg


# ---------------------------------------------------------------- parsing


def _parse_value(text: str, tp, where: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("none", "auto", ""):
            return None
        return _parse_value(text, args[0], where)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_parse_value(t, inner, where) for t in text.split(",") if t.strip())
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {text!r} as {tp.__name__}") from None
    return text


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section_types(section_cls) -> dict:
    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in fields(section_cls)}


def parse_config(text: str, scale: str | None = None) -> ExperimentConfig:
    """Parse config text over the preset for ``scale`` (or the file's own scale, else paper)."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    sections = {f.name: f.type for f in fields(ExperimentConfig)}
    hints = typing.get_type_hints(ExperimentConfig)
    for name in parser.sections():
        if name not in sections:
            raise ConfigurationError(f"unknown config section [{name}]")
    file_scale = parser.get("experiment", "scale", fallback=None)
    cfg = preset(scale or (file_scale.strip() if file_scale else "paper"))
    for name in parser.sections():
        section_cls = hints[name]
        types_ = _section_types(section_cls)
        updates = {}
        for key, raw in parser.items(name):
            if key not in types_:
                raise ConfigurationError(f"unknown key {key!r} in section [{name}]")
            updates[key] = _parse_value(raw, types_[key], f"[{name}] {key}")
        setattr(cfg, name, replace(getattr(cfg, name), **updates))
    if scale is not None:
        cfg.experiment.scale = scale
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        parser[f.name] = {k.name: _format_value(getattr(section, k.name)) for k in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(path=None, scale: str | None = None) -> ExperimentConfig:
    if path is None:
        return preset(scale or "paper").validate()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(), scale)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Rebuild a config from ``to_dict`` output (e.g. a bundle's snapshot)."""
    hints = typing.get_type_hints(ExperimentConfig)
    cfg = ExperimentConfig()
    for name, values in d.items():
        if name not in hints:
            raise ConfigurationError(f"unknown config section {name!r}")
        types_ = _section_types(hints[name])
        clean = {}
        for k, v in values.items():
            if k not in types_:
                raise ConfigurationError(f"unknown key {k!r} in section {name!r}")
            clean[k] = tuple(v) if isinstance(v, list) else v
        setattr(cfg, name, hints[name](**clean))
    return cfg
