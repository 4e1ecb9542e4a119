"""Model bundles: every array and constant needed to score a raw series.

A bundle holds the denoiser (always), the generator and discriminator
(once trained), the normalisation statistics and a snapshot of the
configuration. A denoiser checkpoint is simply a bundle without the
controller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import GanModels, gan_from_arrays, gan_meta
from .data import MinMaxStats
from .diffusion import TrainedDenoiser, denoiser_from_arrays, denoiser_meta
from .errors import ConfigurationError, ParseError
from .nn_core import load_container, parameter_set, save_container

BUNDLE_FORMAT = 1


@dataclass
class ModelBundle:
    denoiser: TrainedDenoiser
    stats: MinMaxStats
    config: dict
    gan: GanModels | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def window(self) -> int:
        return self.denoiser.config.window

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"denoiser/{k}": v.detach().numpy() for k, v in self.denoiser.params().items()}
        if self.gan is not None:
            for prefix, net in (("generator", self.gan.generator), ("discriminator", self.gan.discriminator)):
                out.update({f"{prefix}/{k}": v.detach().numpy() for k, v in parameter_set(net).items()})
        return out

    def meta(self) -> dict:
        return {"kind": "bundle", "bundle_format": BUNDLE_FORMAT, "seed": self.seed,
                "denoiser": denoiser_meta(self.denoiser), "gan": gan_meta(self.gan) if self.gan else None,
                "normalization": self.stats.to_dict(), "config": self.config, "extra": self.extra}

    def save(self, path) -> None:
        save_container(path, self.arrays(), self.meta())


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    arrays, meta = load_container(path)
    if meta.get("kind") != "bundle" or meta.get("bundle_format") != BUNDLE_FORMAT:
        raise ParseError(f"{path} is not a model bundle (format {BUNDLE_FORMAT})")
    den = denoiser_from_arrays(arrays, meta["denoiser"], prefix="denoiser/")
    gan = gan_from_arrays(arrays, meta["gan"]) if meta.get("gan") else None
    return ModelBundle(den, MinMaxStats.from_dict(meta["normalization"]), meta["config"], gan,
                       meta.get("seed", 0), meta.get("extra", {}))
