import itertools

import numpy as np
import pytest

from ffpdet.backbone import PyramidFeatures
from ffpdet.config import FfpConfig
from ffpdet.errors import ConfigError
from ffpdet.ffp import (FFP, FEA, composed_support, fbm_branch_parameters, ffp_closed_form_parameters,
                        hdc_bruteforce, hdc_check, max_gap)
from ffpdet.nn import count_parameters
from ffpdet.tensor import Tensor


def test_fbm_branch_count_and_ratio():
    assert fbm_branch_parameters(256, 16) == 10496
    assert 589824 / 10496 == pytest.approx(56.1951, abs=1e-4)


@pytest.mark.parametrize("rates,L,grid", [([1, 2, 5], [1, 2, 5], False), ([2, 2], [2, 2], True),
                                          ([1, 2, 3], [1, 2, 3], False), ([1, 1, 1], [1, 1, 1], False)])
def test_hdc_recurrence(rates, L, grid):
    rep = hdc_check(rates)
    assert rep.max_distances == L
    assert rep.gridding is grid


def test_composed_support_of_125_is_contiguous():
    s = composed_support([1, 2, 5])
    assert s.min() == -8 and s.max() == 8
    assert max_gap(s) == 1


def test_recurrence_agrees_with_bruteforce_for_nondecreasing_rates():
    for n in (1, 2, 3):
        for rates in itertools.combinations_with_replacement(range(1, 7), n):
            assert hdc_check(rates).max_distances == hdc_bruteforce(rates).max_distances, rates


def test_recurrence_never_below_bruteforce():
    for rates in itertools.product(range(1, 6), repeat=3):
        rec, ora = hdc_check(rates).max_distances, hdc_bruteforce(rates).max_distances
        assert all(r >= o for r, o in zip(rec, ora)), rates


@pytest.mark.parametrize("bad", [[], [0, 1], [1, -2]])
def test_hdc_rejects_bad_rates(bad):
    with pytest.raises(ConfigError):
        hdc_check(bad)


def test_ffp_rejects_gridding_rates(rng):
    cfg = FfpConfig(channels=16, bottleneck=4, dilation_rates=[2, 2])
    with pytest.raises(ConfigError):
        FFP([8, 8, 8], cfg, rng)


def feats(rng, chans=(8, 12, 16), size=(8, 12)):
    h, w = size
    c = [Tensor(rng.normal(size=(1, ch, h >> k, w >> k)).astype(np.float32)) for k, ch in enumerate(chans)]
    return PyramidFeatures(c3=c[0], c4=c[1], c5=c[2])


def test_ffp_shapes_and_closed_form_count(rng):
    cfg = FfpConfig(channels=16, bottleneck=4)
    ffp = FFP([8, 12, 16], cfg, rng)
    out = ffp(feats(rng))
    assert [p.shape for p in out.p_levels()] == [(1, 16, 8, 12), (1, 16, 4, 6), (1, 16, 2, 3)]
    assert count_parameters(ffp) == ffp_closed_form_parameters([8, 12, 16], cfg)


def test_ffp_without_attention_counts(rng):
    cfg = FfpConfig(channels=16, bottleneck=4, fea=False, placement=["fbm", "fbm", "fbm"])
    ffp = FFP([8, 12, 16], cfg, rng)
    assert count_parameters(ffp) == ffp_closed_form_parameters([8, 12, 16], cfg)


def test_fea_gate_is_channelwise(rng):
    fea = FEA(6, 8, 4, rng)
    out = fea(Tensor(rng.normal(size=(1, 6, 5, 5)).astype(np.float32)))
    pre, post = fea.taps["pre"], fea.taps["post"]
    ratio = post / np.where(pre == 0, 1, pre)
    # one gate value per channel, strictly inside (0, 1)
    per_channel = ratio.reshape(8, -1)
    assert np.allclose(per_channel, per_channel[:, :1], atol=1e-5)
    assert ((per_channel > 0) & (per_channel < 1)).all()
    assert out.shape == (1, 8, 5, 5)


def test_zeroed_fbm_branch_is_identity(rng):
    from ffpdet.ffp import FBM
    m = FBM(8, 2, rng)
    m.branch.restore.weight.data[:] = 0
    x = Tensor(rng.normal(size=(1, 8, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(m(x).data, x.data)


def test_zeroed_dfb_gives_zero(rng):
    from ffpdet.ffp import DFB
    m = DFB(8, 2, [1, 2, 5], rng)
    for _, p in m.named_parameters():
        p.data[:] = 0
    assert not m(Tensor(rng.normal(size=(1, 8, 6, 6)).astype(np.float32))).data.any()


def test_top_down_flow_only(rng):
    ffp = FFP([8, 12, 16], FfpConfig(channels=16, bottleneck=4), rng)
    base = feats(rng)
    ref = ffp(base)
    no_c5 = ffp(PyramidFeatures(c3=base.c3, c4=base.c4, c5=Tensor(np.zeros_like(base.c5.data))))
    no_c3 = ffp(PyramidFeatures(c3=Tensor(np.zeros_like(base.c3.data)), c4=base.c4, c5=base.c5))
    assert not np.allclose(no_c5.p3.data, ref.p3.data)
    np.testing.assert_array_equal(no_c3.p5.data, ref.p5.data)


def test_all_fbm_placement_parameter_delta(rng):
    ins = [8, 12, 16]
    full = FfpConfig(channels=16, bottleneck=4)
    plain = FfpConfig(channels=16, bottleneck=4, placement=["fbm", "fbm", "fbm"])
    delta = count_parameters(FFP(ins, full, rng)) - count_parameters(FFP(ins, plain, rng))
    assert delta == 3 * 16 * 16 * 9
