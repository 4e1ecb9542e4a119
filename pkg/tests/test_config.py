import pytest
from hypothesis import given, settings, strategies as st

from diffgan.config import ExperimentConfig, config_from_dict, dump_config, load_config, parse_config, preset
from diffgan.errors import ConfigurationError


def test_defaults_match_reference_setup():
    cfg = preset("paper")
    assert (cfg.data.timesteps, cfg.data.dims, cfg.data.window) == (50_000, 5, 64)
    assert cfg.schedule.steps == 100 and cfg.gan.lam == 0.7
    assert cfg.detect.baseline_steps == (20, 50, 80)
    assert cfg.detect_stride == 32


def test_desk_preset_shrinks_series_and_epochs():
    desk, paper = preset("desk"), preset("paper")
    assert desk.data.timesteps == 2000 and desk.experiment.scale == "desk"
    assert desk.denoiser.epochs < paper.denoiser.epochs and desk.gan.epochs < paper.gan.epochs
    with pytest.raises(ConfigurationError):
        preset("huge")


def test_parse_overrides_and_scale():
    cfg = parse_config("[experiment]\nscale = desk\n[data]\nwindow = 32\nkinds = trend, seasonal\n"
                       "[detect]\nstride = auto\n[schedule]\nbeta_end = 0.5\n")
    assert cfg.data.timesteps == 2000 and cfg.data.window == 32
    assert cfg.data.kinds == ("trend", "seasonal") and cfg.detect.stride is None and cfg.detect_stride == 16
    assert cfg.schedule.beta_end == 0.5
    assert parse_config("[data]\nwindow = 32\n", scale="desk").data.timesteps == 2000


@pytest.mark.parametrize("text", ["[nope]\nx = 1\n", "[data]\nwindo = 3\n", "[data]\nwindow = 3.5\n",
                                  "[gan]\nstraight_through = maybe\n", "[data]\nkinds = spikes\n",
                                  "[detect]\nbaseline_steps = 0, 20\n", "not a config", "[gan]\nlam = 0\n"])
def test_invalid_config_rejected(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "none.ini")


def test_round_trip_defaults():
    for scale in ("desk", "paper"):
        cfg = preset(scale)
        assert parse_config(dump_config(cfg)) == cfg
        assert config_from_dict(cfg.to_dict()) == cfg


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 64 - 1), window=st.integers(1, 512), lr=st.floats(1e-7, 1.0),
       stride=st.one_of(st.none(), st.integers(1, 64)), st_on=st.booleans(),
       hidden=st.lists(st.integers(1, 256), min_size=1, max_size=4), beta=st.one_of(st.none(), st.floats(1e-6, 0.5)))
def test_round_trip_is_identity(seed, window, lr, stride, st_on, hidden, beta):
    cfg = preset("desk")
    cfg.experiment.seed = seed
    cfg.data.window = window
    cfg.denoiser.lr = lr
    cfg.detect.stride = stride
    cfg.gan.straight_through = st_on
    cfg.discriminator.hidden = tuple(hidden)
    cfg.schedule.beta_start = beta
    text = dump_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert dump_config(again) == text
