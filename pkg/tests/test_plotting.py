import numpy as np
import pytest

from ffpdet.errors import DataError
from ffpdet.plotting import (average_feature_map, dump_average_feature_map, plot_feature_panels,
                             plot_histogram, plot_loss_curve, plot_nms_scaling, plot_parameter_breakdown,
                             read_pgm)

PNG = b"\x89PNG"


def test_average_map_scaling(rng):
    m = rng.normal(size=(1, 4, 5, 6))
    g = average_feature_map(m)
    assert g.dtype == np.uint8 and g.shape == (5, 6)
    assert g.min() == 0 and g.max() == 255
    assert not average_feature_map(np.ones((1, 3, 2, 2))).any()


def test_average_map_rejects_batches(rng):
    with pytest.raises(DataError):
        average_feature_map(rng.normal(size=(2, 3, 4, 4)))


def test_pgm_roundtrip(tmp_path, rng):
    p = str(tmp_path / "m.pgm")
    g = dump_average_feature_map(rng.normal(size=(1, 3, 7, 9)), p)
    np.testing.assert_array_equal(read_pgm(p), g)


def test_figures_are_written(tmp_path, rng):
    hist = [(i, 1 / (i + 1), 0.1, 0.01, 0.3, 1e-3) for i in range(30)]
    paths = [
        plot_loss_curve(hist, str(tmp_path / "loss.png"), decay_at=20),
        plot_histogram({0: 3, 1: 5, 2: 1}, str(tmp_path / "hist.png")),
        plot_nms_scaling({100: 0.001, 10000: 0.5}, str(tmp_path / "nms.png")),
        plot_feature_panels({"a": rng.normal(size=(1, 2, 4, 4))}, str(tmp_path / "fm.png"),
                            image=rng.uniform(size=(3, 8, 8))),
        plot_parameter_breakdown([("a", 10), ("b", 1000)], str(tmp_path / "p.png")),
    ]
    for p in paths:
        with open(p, "rb") as fh:
            assert fh.read(4) == PNG
