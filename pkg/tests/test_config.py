import pytest

from ffpdet.config import GlobalConfig, TrainConfig, load_config, parse_config, render_config, set_value
from ffpdet.errors import ConfigError


def test_render_parse_roundtrip():
    cfg = GlobalConfig()
    cfg.train.lr = 3e-4
    cfg.ffp.dilation_rates = [1, 2, 3]
    back = parse_config(render_config(cfg))
    assert render_config(back) == render_config(cfg)


@pytest.mark.parametrize("dotted,raw,attr,want", [
    ("train.iterations", "12", ("train", "iterations"), 12),
    ("train.lr", "0.01", ("train", "lr"), 0.01),
    ("detector.image_threshold", "0.3", ("detector", "image_threshold"), 0.3),
    ("scene.preset", "dust_collector", ("scene", "preset"), "dust_collector"),
    ("ffp.fea", "false", ("ffp", "fea"), False),
])
def test_set_value(dotted, raw, attr, want):
    cfg = GlobalConfig()
    set_value(cfg, dotted, raw)
    assert getattr(getattr(cfg, attr[0]), attr[1]) == want


@pytest.mark.parametrize("dotted,raw", [("train.iterations", "1.5"), ("train.nope", "1"),
                                        ("bogus.x", "1"), ("train", "1"), ("ffp.fea", "1")])
def test_set_value_rejects(dotted, raw):
    with pytest.raises(ConfigError):
        set_value(GlobalConfig(), dotted, raw)


def test_schedule_decay_point():
    tc = TrainConfig(iterations=100, lr=1.0)
    assert tc.decay_at() == 75
    assert tc.lr_at(74) == 1.0 and tc.lr_at(75) == pytest.approx(0.1)
    with pytest.raises(ConfigError):
        TrainConfig(iterations=10, decay_iteration=10).validate()


def test_long_schedule_values():
    tc = TrainConfig.paper_schedule()
    assert (tc.batch_size, tc.lr, tc.iterations, tc.decay_at()) == (16, 5e-5, 80000, 60000)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.cfg"))
    p = tmp_path / "bad.cfg"
    p.write_text("[train]\nlr = fast\n")
    with pytest.raises(ConfigError):
        load_config(str(p))
    p.write_text("[train]\nprecision = \"f16\"\n")
    with pytest.raises(ConfigError):
        load_config(str(p))
