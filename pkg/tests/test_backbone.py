import numpy as np
import pytest

from ffpdet.backbone import build_backbone
from ffpdet.config import BackboneConfig
from ffpdet.errors import ShapeError
from ffpdet.nn import count_parameters
from ffpdet.tensor import Tensor


@pytest.fixture(scope="module")
def backbone():
    return build_backbone(BackboneConfig(), seed=0)


def test_pyramid_strides_and_channels(backbone):
    x = Tensor(np.zeros((1, 3, 64, 96), dtype=np.float32))
    feats = backbone(x)
    sizes = [t.shape[2:] for t in feats.c_levels()]
    assert sizes == [(8, 12), (4, 6), (2, 3)]
    assert [t.shape[1] for t in feats.c_levels()] == backbone.out_channels


def test_rejects_unaligned_input(backbone):
    with pytest.raises(ShapeError):
        backbone(Tensor(np.zeros((1, 3, 60, 96), dtype=np.float32)))
    with pytest.raises(ShapeError):
        backbone(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))


def test_same_seed_same_weights():
    a, b = build_backbone(BackboneConfig(), 3), build_backbone(BackboneConfig(), 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    c = build_backbone(BackboneConfig(), 4)
    assert not np.array_equal(a.stem.weight.data, c.stem.weight.data)


def test_parameter_count_attribute(backbone):
    assert backbone.parameter_count == count_parameters(backbone) > 0


def test_has_channel_attention(backbone):
    assert backbone.se_modules()
