import os
import subprocess
import sys

import pytest

from ffpdet.cli import main, table
from ffpdet.plotting import read_pgm

SMALL = ["--set", "scene.width=96", "--set", "scene.height=64", "--set", "ffp.channels=32",
         "--set", "detector.head_channels=16", "--set", "train.batch_size=2",
         "--set", "train.iterations=3", "--set", "train.checkpoint_every=0"]


def read_block(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    return dict(ln.split(" = ", 1) for ln in lines[1:])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = str(tmp_path_factory.mktemp("cli"))
    assert main(["synth", "--workdir", wd, "--quiet", "--train", "4", "--test", "3"] + SMALL) == 0
    assert main(["train", "--workdir", wd, "--quiet"] + SMALL) == 0
    return wd


def test_analyze_reports_rates_and_ratio(tmp_path, capsys):
    assert main(["analyze", "--workdir", str(tmp_path), "--rates", "1,2,5"]) == 0
    out = capsys.readouterr().out
    assert "L: 1 2 5" in out and "gridding: no" in out
    assert "10496" in out and "589824" in out and "56.19" in out
    block = read_block(tmp_path / "analyze.txt")
    assert block["hdc_gridding"] == "no" and block["fbm_branch_parameters"] == "10496"
    assert os.path.exists(tmp_path / "analyze_params.png")


def test_analyze_flags_gridding(tmp_path, capsys):
    assert main(["analyze", "--workdir", str(tmp_path), "--rates", "2,2"]) == 0
    assert "gridding: yes" in capsys.readouterr().out


def test_synth_and_train_outputs(workdir):
    syn = read_block(os.path.join(workdir, "synth.txt"))
    assert syn["train_images"] == "4" and syn["width"] == "96"
    tr = read_block(os.path.join(workdir, "train.txt"))
    assert tr["iterations"] == "3"
    assert os.path.exists(os.path.join(workdir, "train_loss.png"))


def test_eval_writes_metrics(workdir):
    assert main(["eval", "--workdir", workdir, "--quiet", "--with-nms", "--score-threshold", "0.1"]) == 0
    m = read_block(os.path.join(workdir, "eval", "metrics.txt"))
    assert float(m["CDR"]) + float(m["FDR"]) + float(m["MDR"]) == pytest.approx(1.0, abs=1e-5)
    assert m["with_nms"] == "1"
    with open(os.path.join(workdir, "eval", "detections.txt")) as fh:
        assert fh.readline().split() == ["image", "class", "score", "x1", "y1", "x2", "y2"]


def test_bench_writes_report(workdir):
    assert main(["bench", "--workdir", workdir, "--quiet", "--with-nms", "--stress-boxes", "500",
                 "--limit", "2"]) == 0
    b = read_block(os.path.join(workdir, "bench", "bench.txt"))
    assert b["images"] == "2" and "nms_time_at_500_s" in b
    assert os.path.exists(os.path.join(workdir, "bench", "nms_scaling.png"))


@pytest.mark.parametrize("tap", ["fea_pre", "fea_post", "dfb_branch", "dfb_out"])
def test_viz_dumps_pgm(workdir, tap):
    assert main(["viz", "--workdir", workdir, "--quiet", "--tap", tap, "--index", "1"]) == 0
    g = read_pgm(os.path.join(workdir, "viz", f"{tap}.pgm"))
    assert g.ndim == 2 and g.max() == 255


def test_resume_via_cli(workdir, tmp_path):
    wd = str(tmp_path)
    common = SMALL + ["--set", "train.checkpoint_every=1", "--data", os.path.join(workdir, "data")]
    assert main(["train", "--workdir", wd, "--quiet", "--iterations", "2"] + common) == 1 - 1
    ck = os.path.join(wd, "checkpoints", "iter_000002.ckpt")
    assert main(["train", "--workdir", wd, "--quiet", "--iterations", "3", "--resume", ck] + common) == 0


@pytest.mark.parametrize("argv,code", [
    (["eval", "--checkpoint", "missing.ckpt"], 2),
    (["train", "--set", "train.bogus=1"], 2),
    (["train", "--set", "novalue"], 2),
    (["analyze", "--rates", "1,x"], 2),
    (["analyze", "--rates", "0,1"], 2),
    (["viz", "--tap", "nope"], 2),
    (["frobnicate"], 2),
    (["eval", "--data", "nowhere", "--checkpoint", "x"], 2),
])
def test_bad_input_exit_codes(tmp_path, argv, code, capsys):
    assert main(argv[:1] + ["--workdir", str(tmp_path)] + argv[1:]) == code
    assert capsys.readouterr().err


def test_missing_dataset_is_data_error(tmp_path, workdir, capsys):
    ck = os.path.join(workdir, "model.ckpt")
    assert main(["eval", "--workdir", str(tmp_path), "--checkpoint", ck]) == 2
    assert "no test split" in capsys.readouterr().err


def test_thread_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("FFPDET_THREADS", "0")
    assert main(["analyze", "--workdir", str(tmp_path), "--quiet"]) == 2
    monkeypatch.setenv("FFPDET_THREADS", "1")
    assert main(["analyze", "--workdir", str(tmp_path), "--quiet"]) == 0


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "ffpdet.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "train", "eval", "bench", "analyze", "viz", "check"):
        assert cmd in out.stdout


def test_table_alignment():
    text = table([("a", 1), ("long", 22)], ["k", "v"])
    lines = text.splitlines()
    assert len({len(ln) for ln in lines}) == 1
