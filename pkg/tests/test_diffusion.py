import math

import numpy as np
import pytest
import torch

from diffgan.data import make_windows
from diffgan.diffusion import (DenoiserConfig, NoiseSchedule, OptimConfig, TrainedDenoiser, build_schedule,
                               build_unet, denoise_module, denoise_step, denoiser_from_arrays, denoiser_loss,
                               denoiser_meta, forward_sample, partial_diffusion_reconstruct, plateaued,
                               train_denoiser)
from diffgan.errors import ConfigurationError, DivergenceError, ScheduleError, StepRangeError
from diffgan.nn_core import RngStream, backward, sample_gaussian


class ZeroDenoiser:
    def __init__(self, schedule):
        self.schedule = schedule

    def __call__(self, x, steps):
        return torch.zeros_like(x)


class ConstantNoise:
    """Predicts a fixed noise tensor regardless of input."""

    def __init__(self, schedule, eps):
        self.schedule, self.eps = schedule, eps

    def __call__(self, x, steps):
        return self.eps


class CleanAware:
    """Returns the exact noise that separates x_n from a known x0."""

    def __init__(self, schedule, x0):
        self.schedule, self.x0 = schedule, x0

    def __call__(self, x, steps):
        ab = torch.as_tensor(self.schedule.alpha_bar, dtype=x.dtype)[torch.as_tensor(steps).expand(len(x))]
        ab = ab.reshape(-1, *([1] * (x.dim() - 1)))
        return (x - ab.sqrt() * self.x0[: len(x)]) / (1 - ab).sqrt()


# --------------------------------------------------------------- schedule


def test_single_step_schedule():
    s = build_schedule(1, 0.1, 0.1, max_alpha_bar=None)
    assert s.alpha[1:] == pytest.approx([0.9])
    assert s.alpha_bar[1:] == pytest.approx([0.9])
    assert s.sigma[1] == 0.0


def test_two_step_schedule():
    s = NoiseSchedule(np.array([0.1, 0.2]))
    assert s.alpha_bar[1:] == pytest.approx([0.9, 0.72])
    # hand evaluation: sqrt(0.2 * 0.1 / 0.28)
    assert s.sigma[2] == pytest.approx(0.2673, abs=1e-4)
    assert s.sigma[2] == pytest.approx(math.sqrt(0.2 * 0.1 / 0.28), rel=1e-12)


def test_default_linear_schedule_reaches_noise():
    s = build_schedule(100, 1e-4 * 10, 0.02 * 10)
    assert s.alpha_bar[100] < 0.01
    assert np.array_equal(s.betas, build_schedule(100).betas)
    ab = s.alpha_bar
    assert np.all(np.diff(ab) < 0)


def test_cosine_schedule_monotone():
    s = build_schedule(50, shape="cosine")
    assert np.all(np.diff(s.alpha_bar) < 0) and s.alpha_bar[-1] < 0.05


@pytest.mark.parametrize("kw", [dict(N=0), dict(N=10, beta_start=0.2, beta_end=0.1),
                                dict(N=10, beta_start=0.1, beta_end=1.0), dict(N=10, shape="quadratic")])
def test_schedule_preconditions(kw):
    with pytest.raises(ScheduleError):
        build_schedule(**kw)


def test_weak_schedule_rejected():
    with pytest.raises(ScheduleError, match="beta_end or N"):
        build_schedule(10, 1e-4, 1e-3)


def test_schedule_round_trip():
    s = build_schedule(20)
    assert np.array_equal(NoiseSchedule.from_dict(s.to_dict()).alpha_bar, s.alpha_bar)


# ---------------------------------------------------------------- forward


def test_forward_zero_noise_and_zero_signal():
    s = build_schedule(10)
    x0 = torch.randn(3, 4, 2, dtype=torch.float64)
    eps = torch.randn_like(x0)
    ab = s.alpha_bar[4]
    assert torch.allclose(forward_sample(x0, 4, torch.zeros_like(x0), s), math.sqrt(ab) * x0)
    assert torch.allclose(forward_sample(torch.zeros_like(x0), 4, eps, s), math.sqrt(1 - ab) * eps)


def test_forward_per_sample_steps():
    s = build_schedule(10)
    x0 = torch.ones(2, 3, dtype=torch.float64)
    out = forward_sample(x0, torch.tensor([1, 10]), torch.zeros_like(x0), s)
    assert out[0, 0].item() == pytest.approx(math.sqrt(s.alpha_bar[1]))
    assert out[1, 0].item() == pytest.approx(math.sqrt(s.alpha_bar[10]))


@pytest.mark.parametrize("n", [0, 11, -1])
def test_forward_step_range(n):
    s = build_schedule(10)
    with pytest.raises(StepRangeError):
        forward_sample(torch.zeros(1, 2), n, torch.zeros(1, 2), s)


# ---------------------------------------------------------------- reverse


def test_step_with_zero_prediction():
    s = build_schedule(10)
    den = ZeroDenoiser(s)
    x = torch.randn(2, 5, dtype=torch.float64)
    assert torch.allclose(denoise_step(x, 1, den, RngStream(0)), x / math.sqrt(s.alpha[1]))
    assert torch.allclose(denoise_step(x, 2, den, z=torch.zeros_like(x)), x / math.sqrt(s.alpha[2]))


def test_step_adds_sigma_noise():
    s = build_schedule(10)
    x = torch.zeros(1, 3, dtype=torch.float64)
    z = torch.ones_like(x)
    assert torch.allclose(denoise_step(x, 5, ZeroDenoiser(s), z=z), s.sigma[5] * z)


def test_single_step_schedule_inversion():
    s = build_schedule(1, 0.1, 0.1, max_alpha_bar=None)
    x0 = torch.randn(4, 6, dtype=torch.float64)
    eps = torch.randn_like(x0)
    x1 = forward_sample(x0, 1, eps, s)
    assert (denoise_step(x1, 1, ConstantNoise(s, eps), RngStream(0)) - x0).abs().max() < 1e-5


def test_module_step_zero_is_identity():
    s = build_schedule(10)
    x = torch.randn(3, 4)
    for variant in ("ddpm", "ddim", "single"):
        assert torch.equal(denoise_module(x, 0, ZeroDenoiser(s), RngStream(0), variant), x)


@pytest.mark.parametrize("n", [1, 7, 50, 100])
def test_single_and_ddim_oracle(n):
    s = build_schedule(100)
    x0 = torch.randn(3, 8, 2, dtype=torch.float64)
    eps = torch.randn_like(x0)
    x_n = forward_sample(x0, n, eps, s)
    oracle = ConstantNoise(s, eps)
    assert (denoise_module(x_n, n, oracle, variant="single") - x0).abs().max() < 1e-5
    assert (denoise_module(x_n, n, oracle, variant="ddim") - x0).abs().max() < 1e-4


@pytest.mark.parametrize("n", [1, 20, 100])
def test_ddpm_oracle_without_noise(n):
    s = build_schedule(100)
    x0 = torch.randn(3, 8, 2, dtype=torch.float64)
    x_n = forward_sample(x0, n, torch.randn_like(x0), s)
    assert (denoise_module(x_n, n, CleanAware(s, x0), None, "ddpm") - x0).abs().max() < 1e-3


def test_ddpm_oracle_in_expectation():
    s = build_schedule(20)
    x0 = torch.randn(1, 4, dtype=torch.float64).expand(100, 4).clone()
    x_n = forward_sample(x0, 15, sample_gaussian(RngStream(1), x0.shape, torch.float64), s)
    out = denoise_module(x_n, 15, CleanAware(s, x0), RngStream(2), "ddpm")
    assert (out.mean(0) - x0[0]).abs().max() < 1e-2


class InputDependent:
    def __init__(self, schedule):
        self.schedule = schedule

    def __call__(self, x, steps):
        k = torch.as_tensor(steps, dtype=x.dtype).expand(len(x)).reshape(-1, *([1] * (x.dim() - 1)))
        return torch.tanh(x) * k / 10


def test_per_sample_steps_match_individual_calls():
    s = build_schedule(10)
    x = torch.randn(3, 4, 2, dtype=torch.float64)
    den = InputDependent(s)
    steps = torch.tensor([0, 3, 6])
    for variant in ("ddpm", "ddim", "single"):
        batch = denoise_module(x, steps, den, None, variant)
        for i, n in enumerate(steps.tolist()):
            assert torch.allclose(batch[i:i + 1], denoise_module(x[i:i + 1], n, den, None, variant))


def test_module_rejects_bad_inputs():
    s = build_schedule(10)
    with pytest.raises(StepRangeError):
        denoise_module(torch.zeros(1, 2), 11, ZeroDenoiser(s))
    with pytest.raises(ConfigurationError):
        denoise_module(torch.zeros(1, 2), 1, ZeroDenoiser(s), variant="euler")
    with pytest.raises(StepRangeError):
        partial_diffusion_reconstruct(torch.zeros(1, 2), 0, ZeroDenoiser(s), RngStream(0))


def test_partial_diffusion_oracle_and_determinism():
    s = build_schedule(30)
    x0 = torch.randn(2, 8, 3, dtype=torch.float64)
    oracle = CleanAware(s, x0)
    for m in (1, 10, 30):
        # the DDPM chain stays exact when the oracle tracks the true x0, even with sampler noise
        out = partial_diffusion_reconstruct(x0, m, oracle, RngStream(m), "ddpm")
        assert (out - x0).abs().max() < 1e-6
    den = ZeroDenoiser(s)
    a = partial_diffusion_reconstruct(x0, 10, den, RngStream(3))
    b = partial_diffusion_reconstruct(x0, 10, den, RngStream(3))
    assert torch.equal(a, b)


# ------------------------------------------------------------------ U-Net


def test_unet_shapes_and_zero_init():
    cfg = DenoiserConfig(window=16, channels=3, depth=2, width=8, emb_dim=8, groups=4)
    den = TrainedDenoiser(cfg, build_unet(cfg, RngStream(0)), build_schedule(10))
    x = torch.randn(5, 16, 3)
    for n in (1, 5, 10):
        out = den(x, n)
        assert out.shape == x.shape
        assert torch.all(out == 0)


def test_unet_config_validation():
    with pytest.raises(ConfigurationError):
        DenoiserConfig(window=30, depth=2)
    cfg = DenoiserConfig(window=16, channels=3, width=8, emb_dim=8)
    den = TrainedDenoiser(cfg, build_unet(cfg, RngStream(0)), build_schedule(10))
    with pytest.raises(ConfigurationError, match="unet"):
        den(torch.zeros(1, 16, 4), 1)


def test_checkpoint_arrays_round_trip():
    cfg = DenoiserConfig(window=16, channels=2, width=8, emb_dim=8)
    net = build_unet(cfg, RngStream(1))
    for p in net.parameters():
        p.data.normal_(generator=torch.Generator().manual_seed(3))
    den = TrainedDenoiser(cfg, net, build_schedule(10))
    arrays = {f"den/{k}": v.detach().numpy() for k, v in den.params().items()}
    back = denoiser_from_arrays(arrays, denoiser_meta(den), prefix="den/")
    x = torch.randn(2, 16, 2)
    assert torch.equal(back(x, 4), den(x, 4))


# --------------------------------------------------------------- training


def _sine_windows(T=2000, w=64, D=1):
    t = np.arange(T)[:, None]
    values = 0.5 + 0.4 * np.sin(2 * np.pi * t / 50 + np.arange(D))
    return make_windows(values, w, 1)


def test_initial_loss_is_unit_mse():
    cfg = DenoiserConfig(window=64, channels=1, width=8, emb_dim=8)
    den = TrainedDenoiser(cfg, build_unet(cfg, RngStream(0)), build_schedule(100))
    batch = torch.as_tensor(_sine_windows().windows[:64], dtype=torch.float32)
    rng = RngStream(5)
    eps = sample_gaussian(rng, batch.shape)
    steps = torch.randint(1, 101, (64,), generator=rng.torch)
    assert abs(denoiser_loss(den, batch, steps, eps).item() - 1.0) < 0.2


def test_training_halves_loss_on_sinusoid():
    ws = _sine_windows()
    cfg = DenoiserConfig(window=64, channels=1, width=8, emb_dim=16)
    den, hist = train_denoiser(ws, cfg, build_schedule(100), OptimConfig(max_epochs=6, batch_size=64), seed=0)
    assert len(hist) == 6
    assert hist[-1]["loss"] < 0.5 * hist[0]["loss"]


def test_one_iteration_gradient_is_seeded():
    ws = _sine_windows(T=200)

    def grads(seed):
        cfg = DenoiserConfig(window=64, channels=1, width=8, emb_dim=8)
        rng = RngStream(seed)
        den = TrainedDenoiser(cfg, build_unet(cfg, rng.spawn("init")), build_schedule(100))
        with torch.no_grad():
            den.net.out.conv.weight.normal_(generator=rng.spawn("w").torch)
        batch = torch.as_tensor(ws.windows[:8], dtype=torch.float32)
        eps = sample_gaussian(rng.spawn("eps"), batch.shape)
        loss = denoiser_loss(den, batch, torch.randint(1, 101, (8,), generator=rng.spawn("n").torch), eps)
        return backward(loss, den.params())

    a, b = grads(3), grads(3)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_training_is_deterministic():
    ws = _sine_windows(T=300)
    cfg = DenoiserConfig(window=64, channels=1, width=8, emb_dim=8)
    runs = [train_denoiser(ws, cfg, build_schedule(100), OptimConfig(max_epochs=2), seed=9) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    p0, p1 = runs[0][0].params(), runs[1][0].params()
    assert all(torch.equal(p0[k], p1[k]) for k in p0)


def test_divergence_reports_iteration():
    ws = _sine_windows(T=200)
    ws.windows[5:, 3, 0] = np.inf
    cfg = DenoiserConfig(window=64, channels=1, width=8, emb_dim=8)
    with pytest.raises(DivergenceError) as err:
        train_denoiser(ws, cfg, build_schedule(10), OptimConfig(max_epochs=1, batch_size=4), seed=0)
    assert err.value.iteration is not None


def test_plateau_rule():
    assert not plateaued([1.0, 0.9, 0.8], patience=2, min_improvement=0.01)
    assert plateaued([1.0, 0.999, 0.998, 0.997], patience=2, min_improvement=0.01)
    assert not plateaued([1.0, 0.5], patience=0, min_improvement=0.01)


def test_large_steps_degrade_trained_reconstruction():
    ws = _sine_windows(T=600)
    cfg = DenoiserConfig(window=64, channels=1, width=8, emb_dim=16)
    den, _ = train_denoiser(ws, cfg, build_schedule(100), OptimConfig(max_epochs=4), seed=1)
    x0 = torch.as_tensor(ws.windows[:4], dtype=torch.float32)
    err = {m: np.mean([(partial_diffusion_reconstruct(x0, m, den, RngStream(s)) - x0).pow(2).mean().item()
                       for s in range(20)]) for m in (1, 100)}
    assert err[1] < err[100]
