from collections import OrderedDict

import numpy as np
import pytest

from ffpdet.checkpoint import check_manifest, load_checkpoint, save_checkpoint
from ffpdet.errors import CheckpointError
from ffpdet.train import load_model, save_training_checkpoint


@pytest.fixture
def arrays(rng):
    return OrderedDict([("a.w", rng.normal(size=(2, 3))), ("b", np.float64(1.5) * np.ones(()))])


@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_roundtrip(tmp_path, arrays, precision):
    p = str(tmp_path / "x.ckpt")
    size = save_checkpoint(p, arrays, "[train]\n", precision, {"iteration": 3})
    ck = load_checkpoint(p)
    assert ck.precision == precision and ck.state == {"iteration": 3}
    assert size == (tmp_path / "x.ckpt").stat().st_size
    for k in arrays:
        np.testing.assert_allclose(ck.arrays[k], arrays[k], rtol=1e-6)


def test_truncation_detected(tmp_path, arrays):
    p = tmp_path / "x.ckpt"
    save_checkpoint(str(p), arrays)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(str(p))


def test_wrong_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(p))


def test_manifest_mismatch_lists_names(arrays):
    other = OrderedDict(arrays)
    other["extra"] = np.zeros(2)
    other["a.w"] = np.zeros((3, 3))
    with pytest.raises(CheckpointError, match="unexpected extra"):
        check_manifest(arrays, other)


def test_model_roundtrip_is_exact(tmp_path, model, cfg):
    p = str(tmp_path / "m.ckpt")
    save_training_checkpoint(p, model, cfg)
    back, back_cfg, info = load_model(p)
    assert info["state"] == {}
    for (na, a), (nb, b) in zip(model.state_arrays().items(), back.state_arrays().items()):
        assert na == nb
        np.testing.assert_array_equal(a, b)
    assert back_cfg.ffp.channels == cfg.ffp.channels


def test_architecture_mismatch_is_reported(tmp_path, model, cfg):
    p = str(tmp_path / "m.ckpt")
    save_training_checkpoint(p, model, cfg)
    cfg.detector.head_channels = 8
    with pytest.raises(CheckpointError, match="does not match"):
        load_model(p, cfg)
