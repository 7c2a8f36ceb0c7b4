import numpy as np
import pytest

from ffpdet import functional as F
from ffpdet.errors import ConfigError
from ffpdet.functional import ConvSpec, RunningStats
from ffpdet.gradcheck import check_gradients
from ffpdet.tensor import Tensor


def naive_conv(x, w, b, spec):
    n, c, h, wd = x.shape
    p, s, d, g = spec.padding, spec.stride, spec.dilation, spec.groups
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = spec.output_size(h, wd)
    co = w.shape[0]
    cig, cog = c // g, co // g
    out = np.zeros((n, co, ho, wo))
    for o in range(co):
        grp = o // cog
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, grp * cig:(grp + 1) * cig,
                           i * s:i * s + d * (spec.kernel - 1) + 1:d,
                           j * s:j * s + d * (spec.kernel - 1) + 1:d]
                out[:, o, i, j] = (patch * w[o]).sum(axis=(1, 2, 3))
        if b is not None:
            out[:, o] += b[o]
    return out


SPECS = [
    ConvSpec(3, 4, 3, padding=1, has_bias=True),
    ConvSpec(3, 5, 3, stride=2, padding=1),
    ConvSpec(4, 4, 3, padding=2, dilation=2),
    ConvSpec(4, 4, 3, padding=1, groups=4),
    ConvSpec(4, 6, 1),
    ConvSpec(4, 4, 5, stride=2, padding=2, groups=2),
]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"k{s.kernel}s{s.stride}d{s.dilation}g{s.groups}")
def test_conv_forward_matches_loops(rng, spec):
    x = rng.normal(size=(2, spec.in_channels, 9, 7))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=spec.out_channels) if spec.has_bias else None
    got = F.conv2d(Tensor(x, dtype=np.float64), spec, Tensor(w, dtype=np.float64),
                   None if b is None else Tensor(b, dtype=np.float64))
    np.testing.assert_allclose(got.data, naive_conv(x, w, b, spec), atol=1e-10)


@pytest.mark.parametrize("spec", SPECS[:4], ids=["bias", "strided", "dilated", "depthwise"])
def test_conv_gradients(rng, spec):
    x = Tensor(rng.normal(size=(1, spec.in_channels, 6, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=spec.weight_shape), requires_grad=True, dtype=np.float64)
    tens = {"x": x, "w": w}
    b = None
    if spec.has_bias:
        b = tens["b"] = Tensor(rng.normal(size=spec.out_channels), requires_grad=True, dtype=np.float64)
    rep = check_gradients(lambda: (F.conv2d(x, spec, w, b) ** 2).sum(), tens, max_elements=20)
    assert all(r["passed"] for r in rep), rep


def test_parameter_count_closed_form():
    assert ConvSpec(256, 256, 3).parameter_count == 589824
    assert ConvSpec(256, 16, 1).parameter_count == 4096
    assert ConvSpec(8, 8, 3, groups=8, has_bias=True).parameter_count == 8 * 9 + 8


def test_same_padding_keeps_size():
    spec = ConvSpec.same(4, 4, 3, dilation=5)
    assert spec.output_size(20, 12) == (20, 12)


def test_upsample_and_gap(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 4)), dtype=np.float64)
    up = F.upsample_nearest_2x(x)
    assert up.shape == (1, 2, 6, 8)
    np.testing.assert_array_equal(up.data[:, :, ::2, ::2], x.data)
    np.testing.assert_allclose(F.global_avg_pool(x).data.ravel(), x.data.mean(axis=(2, 3)).ravel())


def test_batch_affine_train_then_infer(rng):
    x = Tensor(rng.normal(2.0, 3.0, size=(8, 3, 5, 5)), dtype=np.float64)
    scale = Tensor(np.ones(3), dtype=np.float64)
    shift = Tensor(np.zeros(3), dtype=np.float64)
    stats = RunningStats(3, np.float64)
    with pytest.raises(ConfigError):
        F.batch_affine(x, scale, shift, stats, "infer")
    y = F.batch_affine(x, scale, shift, stats, "train")
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    assert stats.count == 1
    assert F.batch_affine(x, scale, shift, stats, "infer").shape == x.shape


def test_hard_swish_values():
    x = Tensor(np.array([-4.0, -3.0, 0.0, 1.0, 3.0, 5.0]), dtype=np.float64)
    want = x.data * np.clip(x.data + 3, 0, 6) / 6
    np.testing.assert_allclose(F.hard_swish(x).data, want)
