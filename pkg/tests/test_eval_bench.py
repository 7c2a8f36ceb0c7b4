import os

import numpy as np
import pytest

from ffpdet.bench import bench_inference, peak_rss_bytes
from ffpdet.evaluate import detection_records, evaluate
from ffpdet.train import save_training_checkpoint, train


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_data):
    from conftest import small_config
    wd = tmp_path_factory.mktemp("trained")
    return train(small_config(), str(wd), tiny_data)


def test_evaluate_counts_every_image(trained, tiny_test):
    res = evaluate(trained.model, tiny_test, batch_size=4)
    r = res.report
    assert r.m + r.n == len(tiny_test) == res.images
    assert r.cdr + r.fdr + r.mdr == pytest.approx(1.0)
    assert set(res.detections) == set(res.truth)


def test_low_threshold_produces_detections_and_nms_never_adds(trained, tiny_test):
    res = evaluate(trained.model, tiny_test, score_threshold=0.0, with_nms=True)
    plain = evaluate(trained.model, tiny_test, score_threshold=0.0)
    for k in res.detections:
        assert len(res.detections[k]) <= len(plain.detections[k])
        assert res.suppressed[k] == len(plain.detections[k]) - len(res.detections[k])
    assert sum(len(v) for v in plain.detections.values()) > 0


def test_parallel_workers_match_serial(trained, tiny_test):
    a = evaluate(trained.model, tiny_test, batch_size=2, score_threshold=0.05)
    b = evaluate(trained.model, tiny_test, batch_size=2, score_threshold=0.05, workers=2)
    assert detection_records(a.detections) == detection_records(b.detections)
    assert a.predicted == b.predicted


def test_detection_records_format(trained, tiny_test):
    res = evaluate(trained.model, tiny_test, score_threshold=0.0, limit=2)
    lines = detection_records(res.detections)
    assert lines
    fields = lines[0].split()
    assert len(fields) == 7 and fields[0].endswith(".ppm")
    assert 0.0 <= float(fields[2]) <= 1.0


def test_bench_report(trained, tiny_test, tmp_path):
    ckpt = str(tmp_path / "m.ckpt")
    save_training_checkpoint(ckpt, trained.model, trained.model.cfg)
    rep = bench_inference(trained.model, tiny_test, with_nms=True, stress_boxes=1000, limit=2,
                          checkpoint_path=ckpt)
    assert rep.images == 2 and rep.model_size_bytes == os.path.getsize(ckpt)
    assert rep.mean_time >= rep.mean_nms_free_time > 0
    assert rep.mean_nms_time > 0 and sorted(rep.nms_scaling) == [100, 1000]
    assert rep.train_step_time > 0 and rep.peak_rss_bytes > 0
    assert sum(rep.detections_histogram.values()) == 2
    keys = [k for k, _ in rep.rows()]
    assert "nms_time_at_1000_s" in keys


def test_bench_leaves_weights_untouched(trained, tiny_test):
    before = {k: v.copy() for k, v in trained.model.state_arrays().items()}
    bench_inference(trained.model, tiny_test, limit=1)
    for k, v in trained.model.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_peak_rss_positive():
    assert peak_rss_bytes() > 1 << 20
