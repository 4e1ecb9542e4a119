import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffgan.controller import (DiscriminatorConfig, GanModels, GanTrainConfig, GeneratorConfig, StepMapper,
                                adversarial_losses, build_discriminator, build_generator, diffgan_reconstruct,
                                discriminator_objective, gan_from_arrays, gan_meta, generator_objective,
                                map_step, reconstruction_error, reconstruction_loss, train_gan)
from diffgan.data import make_windows
from diffgan.diffusion import (DenoiserConfig, NoiseSchedule, OptimConfig, build_schedule, forward_sample,
                               train_denoiser)
from diffgan.errors import ConfigurationError, DivergenceError, DomainError
from diffgan.nn_core import RngStream, backward, parameter_set
from oracles import central_difference, max_rel_error


class ConstD:
    def __init__(self, p):
        self.p = p

    def prob(self, x):
        return torch.full((len(x),), self.p, dtype=x.dtype)


class IdentityG:
    def __call__(self, x, noise=None):
        return x


class ConstantNoise:
    def __init__(self, schedule, eps):
        self.schedule, self.eps = schedule, eps

    def __call__(self, x, steps):
        return self.eps


class ZeroNoise:
    def __init__(self, schedule):
        self.schedule = schedule

    def __call__(self, x, steps):
        return torch.zeros_like(x)


# ----------------------------------------------------------------- mapper


def test_linear_mapper_examples():
    f = StepMapper.from_schedule(build_schedule(100), "linear")
    assert [map_step(p, f) for p in (0.0, 1.0, 0.5)] == [0, 100, 50]
    assert map_step(0.005, f) == 1            # half rounds up
    assert map_step(0.00499, f) == 0


def test_schedule_mapper_two_step_example():
    f = StepMapper.from_schedule(NoiseSchedule(np.array([0.1, 0.2])), "schedule")
    assert [map_step(p, f) for p in (0.05, 0.15, 0.3)] == [0, 1, 2]
    assert map_step(1.0, f) == 2
    assert map_step(0.1, f) == 1              # boundary: 1 - alpha_bar_1 = 0.1 <= p


def test_schedule_mapper_top_is_N():
    f = StepMapper.from_schedule(build_schedule(100))
    assert f(1.0) == 100 and f(0.0) == 0


@pytest.mark.parametrize("p", [-0.01, 1.01, float("nan")])
def test_mapper_domain(p):
    with pytest.raises(DomainError):
        StepMapper.from_schedule(build_schedule(10))(p)


def test_mapper_vectorised_and_serialised():
    f = StepMapper.from_schedule(build_schedule(50))
    ps = np.linspace(0, 1, 11)
    assert f(ps).tolist() == [f(float(p)) for p in ps]
    assert f(torch.tensor(ps)).tolist() == f(ps).tolist()
    assert StepMapper.from_dict(f.to_dict()) == f
    for k in range(1, 51):
        assert f(f.threshold(k)) >= k


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-4, 0.5), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1),
       st.sampled_from(["linear", "schedule"]))
def test_mapper_monotone_and_in_range(betas, p1, p2, kind):
    f = StepMapper.from_schedule(NoiseSchedule(np.array(betas)), kind)
    lo, hi = min(p1, p2), max(p1, p2)
    assert 0 <= f(lo) <= f(hi) <= len(betas)


# ----------------------------------------------------------------- losses


def test_symmetry_at_half():
    x = torch.randn(4, 8, 2)
    g, d = adversarial_losses(IdentityG(), ConstD(0.5), x, torch.randn_like(x), lam=0.7)
    expect = 0.7 * 2 * math.log(0.5)
    assert g.item() == pytest.approx(expect) and d.item() == pytest.approx(expect)


def test_discriminator_saturation_direction():
    p_fake, p_noise = torch.zeros(5), torch.ones(5)
    d = discriminator_objective(p_fake, p_noise, 0.7).item()
    assert math.isfinite(d) and d == pytest.approx(0.7 * 2 * math.log(1e-7), rel=1e-5)
    g = generator_objective(p_fake, p_noise, 0.7).item()
    assert g == pytest.approx(0.0, abs=1e-6)


def test_adversarial_shape_check():
    x = torch.zeros(2, 4, 1)
    with pytest.raises(ConfigurationError):
        adversarial_losses(IdentityG(), ConstD(0.5), x, torch.zeros(3, 4, 1))


def _tiny_pair(seed=0, noise_input=False):
    rng = RngStream(seed)
    g = build_generator(GeneratorConfig(window=4, channels=2, hidden=2, noise_input=noise_input,
                                        init_noise_level=None), rng.spawn("g")).double()
    d = build_discriminator(DiscriminatorConfig(window=4, channels=2, hidden=(3,)), rng.spawn("d")).double()
    return g, d


def test_generator_loss_matches_finite_differences():
    g, d = _tiny_pair()
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(3, 4, 2, generator=gen, dtype=torch.float64)
    z = torch.randn(3, 4, 2, generator=gen, dtype=torch.float64)
    params = parameter_set(g)
    fn = lambda: adversarial_losses(g, d, x, z, 0.7)[0]
    grads = backward(fn(), params)
    fd = central_difference(fn, list(params.values()))
    for (name, a), b in zip(grads.items(), fd):
        assert max_rel_error(a, b) < 1e-3, name


def test_discriminator_loss_matches_finite_differences():
    g, d = _tiny_pair(3)
    gen = torch.Generator().manual_seed(2)
    x = torch.randn(3, 4, 2, generator=gen, dtype=torch.float64)
    z = torch.randn(3, 4, 2, generator=gen, dtype=torch.float64)
    params = parameter_set(d)
    fn = lambda: adversarial_losses(g, d, x, z, 0.7)[1]
    grads = backward(fn(), params)
    fd = central_difference(fn, list(params.values()))
    for (name, a), b in zip(grads.items(), fd):
        assert max_rel_error(a, b) < 1e-3, name


def test_reconstruction_fixed_point_at_step_zero():
    s = build_schedule(10)
    x = torch.randn(3, 8, 2)
    mapper = StepMapper.from_schedule(s)
    loss, steps = reconstruction_loss(x, IdentityG()(x), ConstD(0.0), mapper, ConstantNoise(s, 0))
    assert steps.tolist() == [0, 0, 0] and loss.item() == 0.0


def test_reconstruction_one_step_oracle():
    s = build_schedule(10)
    x0 = torch.randn(3, 8, 2, dtype=torch.float64)
    eps = torch.randn_like(x0)
    generated = forward_sample(x0, 1, eps, s)
    mapper = StepMapper.from_schedule(s)
    p = mapper.threshold(1) + 1e-9
    loss, steps = reconstruction_loss(x0, generated, ConstD(p), mapper, ConstantNoise(s, eps))
    assert steps.tolist() == [1, 1, 1] and loss.item() < 1e-10


def test_reconstruction_error_reductions():
    a = torch.zeros(2, 3, 4)
    b = torch.ones(2, 3, 4)
    assert reconstruction_error(a, b).tolist() == [12.0, 12.0]
    assert reconstruction_error(a, b, "mean").tolist() == [1.0, 1.0]
    with pytest.raises(ConfigurationError):
        reconstruction_error(a, b, "max")


def test_reconstruction_non_negative():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        a, b = torch.randn(2, 5, 3, generator=gen), torch.randn(2, 5, 3, generator=gen)
        assert (reconstruction_error(a, b) >= 0).all()


def test_no_gradient_reaches_discriminator_through_mapping():
    s = build_schedule(10)
    g, d = _tiny_pair()
    x = torch.randn(2, 4, 2, dtype=torch.float64)
    den = ZeroNoise(s)
    loss, _ = reconstruction_loss(x, g(x), d, StepMapper.from_schedule(s), den)
    grads = torch.autograd.grad(loss, list(d.parameters()), allow_unused=True)
    assert all(gr is None for gr in grads)


# --------------------------------------------------------------- networks


def test_structured_generator_is_forward_noising():
    cfg = GeneratorConfig(window=8, channels=3, hidden=4, init_noise_level=0.3)
    g = build_generator(cfg, RngStream(0))
    x, e = torch.randn(2, 8, 3), torch.randn(2, 8, 3)
    assert torch.allclose(g(x, e), math.sqrt(0.7) * x + math.sqrt(0.3) * e, atol=1e-6)


def test_generator_needs_noise_when_configured():
    g = build_generator(GeneratorConfig(window=8, channels=3, hidden=4), RngStream(0))
    with pytest.raises(ConfigurationError):
        g(torch.zeros(1, 8, 3))


def test_discriminator_output_strictly_inside_unit_interval():
    d = build_discriminator(DiscriminatorConfig(window=4, channels=1, hidden=(2,)), RngStream(0))
    with torch.no_grad():
        d.out.linear.bias.fill_(1e3)
    p = d.prob(torch.zeros(3, 4, 1))
    assert torch.all(p < 1) and torch.all(p > 0)
    with pytest.raises(ConfigurationError, match="discriminator"):
        d(torch.zeros(3, 5, 1))


def test_end_to_end_shape():
    s = build_schedule(10)
    models = GanModels(build_generator(GeneratorConfig(window=8, channels=2, hidden=4), RngStream(0)),
                       build_discriminator(DiscriminatorConfig(window=8, channels=2), RngStream(1)),
                       StepMapper.from_schedule(s))
    den = ZeroNoise(s)
    x = torch.randn(5, 8, 2)
    recon, steps = diffgan_reconstruct(x, models, den, RngStream(2))
    assert recon.shape == x.shape and steps.shape == (5,)
    back = gan_from_arrays({f"{p}/{k}": v.detach().numpy() for p, net in
                            (("generator", models.generator), ("discriminator", models.discriminator))
                            for k, v in parameter_set(net).items()}, gan_meta(models))
    r1, s1 = diffgan_reconstruct(x, back, den, RngStream(2))
    assert torch.equal(r1, recon) and np.array_equal(s1, steps)


# --------------------------------------------------------------- training


@pytest.fixture(scope="module")
def sine_setup():
    t = np.arange(800)[:, None]
    values = 0.5 + 0.35 * np.sin(2 * np.pi * t / 40 + np.arange(2)) + 0.02 * np.sin(t * 1.7)
    train = make_windows(values[:600], 16, 1)
    val = make_windows(values[600:], 16, 4)
    schedule = build_schedule(20)
    den, _ = train_denoiser(train, DenoiserConfig(window=16, channels=2, width=8, emb_dim=16), schedule,
                            OptimConfig(max_epochs=8, batch_size=32), seed=0)
    return train, val, den, StepMapper.from_schedule(schedule)


def _small_cfg(epochs=2, **kw):
    opt = lambda: OptimConfig(lr=1e-3, batch_size=32, max_epochs=epochs, patience=0)
    return GanTrainConfig(optim_g=opt(), optim_d=opt(), **kw)


GCFG = GeneratorConfig(window=16, channels=2, hidden=8)
DCFG = DiscriminatorConfig(window=16, channels=2, hidden=(16,))


def test_training_is_deterministic_and_freezes_denoiser(sine_setup):
    train, _, den, mapper = sine_setup
    before = {k: v.clone() for k, v in den.params().items()}
    flags = [p.requires_grad for p in den.net.parameters()]
    windows = train.windows[:64]
    (m1, h1), (m2, h2) = (train_gan(windows, GCFG, DCFG, den, mapper, _small_cfg(1), seed=4) for _ in range(2))
    assert h1 == h2
    for net1, net2 in ((m1.generator, m2.generator), (m1.discriminator, m2.discriminator)):
        p1, p2 = parameter_set(net1), parameter_set(net2)
        assert all(torch.equal(p1[k], p2[k]) for k in p1)
    after = den.params()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert [p.requires_grad for p in den.net.parameters()] == flags
    assert set(h1[0]) >= {"epoch", "adv_d", "adv_g", "recon", "step"}


def test_training_improves_reconstruction_and_keeps_step_inside(sine_setup):
    train, val, den, mapper = sine_setup
    x = torch.as_tensor(val.windows, dtype=torch.float32)

    def val_error(models):
        with torch.no_grad():
            recon, steps = diffgan_reconstruct(x, models, den, RngStream(11))
        return reconstruction_error(x, recon).mean().item(), steps

    cfg = _small_cfg(4, straight_through=True)
    rng = RngStream(5, ("gan",))
    untrained = GanModels(build_generator(GCFG, rng.spawn("init_g")),
                          build_discriminator(DCFG, rng.spawn("init_d")), mapper)
    models, hist = train_gan(train, GCFG, DCFG, den, mapper, cfg, seed=5)
    assert 1 <= hist[-1]["step"] <= mapper.N - 1
    after, steps = val_error(models)
    assert val_error(untrained)[0] > after
    assert 0 < steps.mean() < mapper.N


def test_collapse_warning(sine_setup):
    train, _, den, mapper = sine_setup
    cfg = _small_cfg(1, collapse_var=1.0, collapse_iters=1)
    with pytest.warns(RuntimeWarning, match="mode collapse"):
        train_gan(train.windows[:64], GCFG, DCFG, den, mapper, cfg, seed=0)


def test_divergence_reports_iteration(sine_setup):
    _, _, den, mapper = sine_setup
    bad = np.full((8, 16, 2), np.nan)
    with pytest.raises(DivergenceError) as err:
        train_gan(bad, GCFG, DCFG, den, mapper, _small_cfg(1), seed=0)
    assert err.value.iteration == 0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        GanTrainConfig(lam=0)
