"""DiffGAN: diffusion denoising with a GAN-controlled noise level for time-series anomaly detection."""

__version__ = "0.1.0"
