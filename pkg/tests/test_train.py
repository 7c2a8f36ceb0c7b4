import filecmp
import math
import os

import numpy as np
import pytest

import ffpdet.train as train_mod
from conftest import small_config
from ffpdet.config import GlobalConfig, scene_preset
from ffpdet.errors import CheckpointError, TrainingError
from ffpdet.synth import generate_dataset, load_dataset
from ffpdet.train import BatchSource, load_model, load_training_set, overfit_smoke, resume, train


def read_curve(path):
    with open(path) as fh:
        rows = fh.read().splitlines()
    assert rows[0] == "iteration total cls l1 giou lr"
    return [tuple(float(v) for v in r.split()) for r in rows[1:]]


def test_train_writes_outputs(tmp_path, tiny_data, cfg):
    res = train(cfg, str(tmp_path), tiny_data)
    rows = read_curve(res.curve)
    assert [int(r[0]) for r in rows] == list(range(6))
    assert all(math.isfinite(v) for r in rows for v in r)
    assert os.path.exists(tmp_path / "model.ckpt")
    assert sorted(os.listdir(tmp_path / "checkpoints")) == ["iter_000003.ckpt", "iter_000006.ckpt"]


def test_schedule_in_curve(tmp_path, tiny_data, cfg):
    rows = read_curve(train(cfg, str(tmp_path), tiny_data).curve)
    lrs = [r[5] for r in rows]
    assert lrs == [cfg.train.lr_at(i) for i in range(6)]
    assert lrs[4] == pytest.approx(cfg.train.lr / 10)


def test_zero_iterations_gives_initial_checkpoint(tmp_path, tiny_data, cfg):
    cfg.train.iterations = 0
    res = train(cfg, str(tmp_path), tiny_data)
    assert res.state.iteration == 0 and read_curve(res.curve) == []
    ref = train_mod.build_detector(cfg, cfg.train.seed)
    model, _, _ = load_model(res.checkpoint)
    for a, b in zip(ref.state_arrays().values(), model.state_arrays().values()):
        np.testing.assert_array_equal(a, b)


def test_identical_runs_identical_curves(tmp_path, tiny_data, cfg):
    a = train(cfg, str(tmp_path / "a"), tiny_data)
    b = train(cfg, str(tmp_path / "b"), tiny_data)
    assert filecmp.cmp(a.curve, b.curve, shallow=False)
    assert filecmp.cmp(a.checkpoint, b.checkpoint, shallow=False)


@pytest.mark.parametrize("precision", ["f64", "f32"])
def test_resume_matches_uninterrupted(tmp_path, tiny_data, precision):
    cfg = small_config(precision=precision, checkpoint_every=1)
    full = train(cfg, str(tmp_path / "full"), tiny_data)
    part = str(tmp_path / "part")
    train(cfg, part, tiny_data, stop_at=3)
    res = train(cfg, part, tiny_data, resume_from=os.path.join(part, "checkpoints", "iter_000003.ckpt"))
    assert read_curve(res.curve) == read_curve(full.curve)
    assert filecmp.cmp(res.checkpoint, full.checkpoint, shallow=False)


def test_save_then_resume_is_identical_state(tmp_path, tiny_data, cfg):
    train(cfg, str(tmp_path), tiny_data, stop_at=3)
    model, state = resume(str(tmp_path / "checkpoints" / "iter_000003.ckpt"))
    assert state.iteration == 3 and state.optimizer.step == 3
    assert set(state.optimizer.exp_avg) == {n for n, _ in model.named_parameters()}


def test_resume_from_weights_only_file(tmp_path, tiny_data, cfg):
    train(cfg, str(tmp_path), tiny_data)
    with pytest.raises(CheckpointError, match="weights-only"):
        resume(str(tmp_path / "model.ckpt"))


def test_resume_with_other_channels_fails(tmp_path, tiny_data, cfg):
    train(cfg, str(tmp_path), tiny_data, stop_at=3)
    cfg.ffp.channels = 24
    with pytest.raises(CheckpointError, match="does not match"):
        resume(str(tmp_path / "checkpoints" / "iter_000003.ckpt"), cfg)


def test_nan_loss_aborts_with_iteration(tmp_path, tiny_data, cfg, monkeypatch):
    real = train_mod.total_loss

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        out.giou = float("nan")
        return out

    monkeypatch.setattr(train_mod, "total_loss", poisoned)
    with pytest.raises(TrainingError, match="iteration 0.*giou"):
        train(cfg, str(tmp_path), tiny_data)


def test_batches_are_pure_functions_of_iteration(tiny_data):
    samples, images = load_training_set(tiny_data)
    a = BatchSource(samples, images, 3, seed=5)
    b = BatchSource(samples, images, 3, seed=5)
    assert [s.image_id for s in a.batch(7)] == [s.image_id for s in b.batch(7)]
    np.testing.assert_array_equal(a.batch(4)[0].image, b.batch(4)[0].image)
    # every image appears once per epoch
    seen = sum((a.indices(i) for i in range(8)), [])
    assert sorted(seen[:8]) == list(range(8))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_model_losses_finite(tmp_path, tiny_data, seed):
    cfg = GlobalConfig()
    cfg.train.batch_size = 2
    cfg.train.iterations = 3
    cfg.train.seed = seed
    res = train(cfg, str(tmp_path), tiny_data)
    assert all(math.isfinite(v) for r in res.history for v in r)


@pytest.fixture(scope="module")
def desk_batch(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("desk") / "data")
    generate_dataset(scene_preset("bogie_key", width=176, height=128), root, 2, 1)
    ds = load_dataset(root, "train")
    return [ds.load(0), ds.load(1)]


def test_overfit_smoke_fails_without_learning(desk_batch):
    assert not overfit_smoke(GlobalConfig(), desk_batch, steps=20, lr=0.0).passed
    rep = overfit_smoke(GlobalConfig(), desk_batch, steps=20, freeze=True)
    assert not rep.passed and rep.final_loss == pytest.approx(rep.initial_loss)


@pytest.mark.slow
def test_overfit_smoke_default_model_passes(desk_batch):
    rep = overfit_smoke(GlobalConfig(), desk_batch, steps=500)
    assert rep.passed, rep
