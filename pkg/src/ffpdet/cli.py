"""Command line entry point: synth, train, eval, bench, analyze, viz, check.

Every path is relative to ``--workdir``. Each command prints an aligned table
and writes a machine-readable ``key = value`` file plus figures next to it.
Exit codes: 0 success, 1 failed check or training failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import copy
import os
import sys
import time
from contextlib import contextmanager
from typing import Iterable, Optional, Sequence


from .errors import CheckpointError, ConfigError, DataError, TrainingError

THREADS_ENV = "FFPDET_THREADS"


# ----------------------------------------------------------------------
# output helpers

def table(rows: Iterable[Sequence], header: Optional[Sequence[str]] = None) -> str:
    rows = [tuple(str(c) for c in r) for r in rows]
    if header:
        rows = [tuple(header)] + rows
    if not rows:
        return ""
    widths = [max(len(r[i]) for r in rows if i < len(r)) for i in range(max(len(r) for r in rows))]
    out = []
    for k, r in enumerate(rows):
        cells = [c.rjust(widths[i]) if i else c.ljust(widths[i]) for i, c in enumerate(r)]
        out.append("  ".join(cells).rstrip())
        if header and k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


def structured(section: str, rows: Iterable[Sequence]) -> str:
    return "\n".join([f"[{section}]"] + [f"{k} = {v}" for k, v in rows]) + "\n"


def write_text(path: str, text: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)
    return path


class Context:
    def __init__(self, args: argparse.Namespace):
        from .config import load_config, scene_preset, set_value
        self.args = args
        self.workdir = os.path.abspath(args.workdir)
        self.quiet = args.quiet
        cfg = load_config(self.path(args.config) if args.config else None)
        if getattr(args, "preset", None):
            base = scene_preset(args.preset)
            for key in ("preset", "shape", "size_range", "aspect_range", "component_count"):
                setattr(cfg.scene, key, getattr(base, key))
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            set_value(cfg, key.strip(), value.strip())
        if args.seed is not None:
            cfg.train.seed = args.seed
            cfg.scene.seed = args.seed
        self.cfg = cfg

    def path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(os.path.abspath(self.args.workdir), p)

    def say(self, text: str = "") -> None:
        if not self.quiet:
            print(text, flush=True)


@contextmanager
def thread_limit():
    """Honour FFPDET_THREADS by capping BLAS/OpenMP pools."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


# ----------------------------------------------------------------------
# commands

def cmd_synth(ctx: Context) -> int:
    from .synth import generate_dataset
    a, cfg = ctx.args, ctx.cfg
    if a.width:
        cfg.scene.width = a.width
    if a.height:
        cfg.scene.height = a.height
    cfg.scene.validate()
    root = ctx.path(a.out or cfg.train.dataset)
    t0 = time.perf_counter()
    summaries = generate_dataset(cfg.scene, root, a.train, a.test)
    rows = []
    for s in summaries:
        rows.append((s.split, s.images, s.fault_images, *s.class_counts.values()))
    names = list(summaries[0].class_counts)
    ctx.say(table(rows, ["split", "images", "fault_images"] + names))
    ctx.say(f"wrote {root} in {time.perf_counter() - t0:.1f}s")
    machine = [("root", os.path.relpath(root, ctx.workdir)), ("preset", cfg.scene.preset),
               ("width", cfg.scene.width), ("height", cfg.scene.height), ("seed", cfg.scene.seed)]
    for s in summaries:
        machine += [(f"{s.split}_images", s.images), (f"{s.split}_fault_images", s.fault_images)]
        machine += [(f"{s.split}_{k}", v) for k, v in s.class_counts.items()]
    write_text(ctx.path("synth.txt"), structured("synth", machine))
    return 0


def cmd_train(ctx: Context) -> int:
    from .config import TrainConfig
    from .plotting import plot_loss_curve
    from .train import train
    a, cfg = ctx.args, ctx.cfg
    if a.schedule == "paper":
        paper = TrainConfig.paper_schedule()
        for key in ("batch_size", "lr", "iterations", "decay_iteration"):
            setattr(cfg.train, key, getattr(paper, key))
    if a.iterations is not None:
        cfg.train.iterations = a.iterations
    if a.lr is not None:
        cfg.train.lr = a.lr
    if a.batch_size is not None:
        cfg.train.batch_size = a.batch_size
    if a.data:
        cfg.train.dataset = a.data
    cfg.validate()
    resume_from = ctx.path(a.resume) if a.resume else None
    res = train(cfg, ctx.workdir, ctx.path(cfg.train.dataset), resume_from=resume_from,
                log=None if ctx.quiet else ctx.say)
    last = res.history[-1] if res.history else (0, 0.0, 0.0, 0.0, 0.0, cfg.train.lr)
    rows = [("iterations", res.state.iteration), ("parameters", res.model.parameter_count),
            ("final_total", f"{last[1]:.6f}"), ("final_cls", f"{last[2]:.6f}"),
            ("final_l1", f"{last[3]:.6f}"), ("final_giou", f"{last[4]:.6f}"),
            ("final_lr", f"{last[5]:.3g}"), ("checkpoint", os.path.relpath(res.checkpoint, ctx.workdir)),
            ("loss_curve", os.path.relpath(res.curve, ctx.workdir))]
    ctx.say(table(rows))
    ctx.say(f"training time {res.seconds:.1f}s")
    write_text(ctx.path("train.txt"), structured("train", rows))
    if res.history:
        plot_loss_curve(res.history, ctx.path("train_loss.png"), cfg.train.decay_at())
    return 0


def _load_for_inference(ctx: Context, checkpoint: Optional[str]):
    from .train import load_model
    path = ctx.path(checkpoint or "model.ckpt")
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} not found (run `train` first or pass --checkpoint)")
    model, cfg, _ = load_model(path)
    det = model.cfg.detector
    a = ctx.args
    if getattr(a, "score_threshold", None) is not None:
        det.score_threshold = a.score_threshold
    if getattr(a, "image_threshold", None) is not None:
        det.image_threshold = a.image_threshold
    return model, path


def _dataset_root(ctx: Context) -> str:
    return ctx.path(ctx.args.data or ctx.cfg.train.dataset)


def cmd_eval(ctx: Context) -> int:
    from .evaluate import detection_records, evaluate
    from .plotting import plot_histogram
    from .synth import load_dataset
    a = ctx.args
    model, _ = _load_for_inference(ctx, a.checkpoint)
    ds = load_dataset(_dataset_root(ctx), a.split)
    res = evaluate(model, ds, with_nms=a.with_nms, limit=a.limit, workers=a.workers)
    rows = res.report.rows() + [("with_nms", int(a.with_nms)),
                                ("nms_noop_images", res.nms_unchanged), ("images", res.images),
                                ("nms_noop_fraction", f"{res.nms_noop_fraction:.6f}")]
    ctx.say(table(rows))
    out = ctx.path(a.out)
    write_text(os.path.join(out, "metrics.txt"), structured("eval", rows))
    write_text(os.path.join(out, "detections.txt"),
               "\n".join(["image class score x1 y1 x2 y2"] + detection_records(res.detections)) + "\n")
    hist = {}
    for dets in res.detections.values():
        hist[len(dets)] = hist.get(len(dets), 0) + 1
    plot_histogram(hist, os.path.join(out, "detections_hist.png"))
    return 0


def cmd_bench(ctx: Context) -> int:
    from . import tensor as T
    from .bench import bench_inference
    from .model import build_detector, preprocess
    from .plotting import plot_histogram, plot_nms_scaling
    from .synth import load_dataset
    from .tensor import Tensor
    from .train import save_training_checkpoint
    a = ctx.args
    ds = load_dataset(_dataset_root(ctx), a.split)
    if a.init:
        model = build_detector(ctx.cfg, ctx.cfg.train.seed)
        # one train-mode pass records the batch-norm statistics inference needs
        n = min(len(ds), a.limit or len(ds), 8)
        with T.no_grad():
            model(Tensor(preprocess([ds.load(i).image for i in range(n)], dtype=model.dtype)))
        ckpt = ctx.path("model_init.ckpt")
        save_training_checkpoint(ckpt, model, ctx.cfg)
    else:
        model, ckpt = _load_for_inference(ctx, a.checkpoint)
    rep = bench_inference(model, ds, with_nms=a.with_nms, repetitions=a.repetitions, warmup=a.warmup,
                          stress_boxes=a.stress_boxes, limit=a.limit, checkpoint_path=ckpt,
                          seed=ctx.cfg.train.seed)
    rows = rep.rows()
    ctx.say(table(rows))
    out = ctx.path(a.out)
    write_text(os.path.join(out, "bench.txt"), structured("bench", rows))
    plot_histogram(rep.detections_histogram, os.path.join(out, "detections_hist.png"))
    if rep.nms_scaling:
        plot_nms_scaling(rep.nms_scaling, os.path.join(out, "nms_scaling.png"))
    ctx.bench_report = rep
    return 0


def cmd_analyze(ctx: Context) -> int:
    from .checks import ratio_text
    from .ffp import fbm_branch_parameters, hdc_bruteforce, hdc_check
    from .functional import ConvSpec
    from .model import build_detector
    from .nn import parameter_breakdown
    from .plotting import plot_parameter_breakdown
    a, cfg = ctx.args, ctx.cfg
    if a.rates:
        try:
            cfg.ffp.dilation_rates = [int(r) for r in a.rates.split(",")]
        except ValueError:
            raise ConfigError(f"--rates expects comma-separated integers, got {a.rates!r}") from None
    hdc = hdc_check(cfg.ffp.dilation_rates, a.kernel)
    oracle = hdc_bruteforce(cfg.ffp.dilation_rates, a.kernel)
    # parameter counts do not depend on the rates; dense stand-ins keep gridding lists analysable
    shape_cfg = copy.deepcopy(cfg)
    shape_cfg.ffp.dilation_rates = [1] * len(hdc.rates)
    model = build_detector(shape_cfg, cfg.train.seed)
    breakdown = parameter_breakdown(model, depth=a.depth)
    c, b = cfg.ffp.channels, cfg.ffp.bottleneck
    fbm = fbm_branch_parameters(c, b)
    dense = ConvSpec(c, c, 3).parameter_count
    ratio = dense / fbm
    mod_rows = list(breakdown.items()) + [("total", model.parameter_count)]
    ctx.say(table(mod_rows, ["module", "parameters"]))
    ref_rows = [(f"fbm_branch ({c}->{b}->{b}->{c})", fbm), (f"dense_3x3 ({c}->{c})", dense),
                ("dense / fbm", ratio_text(ratio))]
    ctx.say()
    ctx.say(table(ref_rows, ["reference", "parameters"]))
    ctx.say()
    ctx.say(f"HDC rates: {' '.join(map(str, hdc.rates))} (K={hdc.kernel})")
    ctx.say(f"L: {' '.join(map(str, hdc.max_distances))}")
    ctx.say(f"oracle L: {' '.join(map(str, oracle.max_distances))}")
    ctx.say(f"gridding: {'yes' if hdc.gridding else 'no'}")
    machine = [(f"params.{k}", v) for k, v in mod_rows]
    machine += [("fbm_branch_parameters", fbm), ("dense_3x3_parameters", dense),
                ("dense_over_fbm", ratio_text(ratio)),
                ("hdc_rates", " ".join(map(str, hdc.rates))), ("hdc_kernel", hdc.kernel),
                ("hdc_L", " ".join(map(str, hdc.max_distances))),
                ("hdc_oracle_L", " ".join(map(str, oracle.max_distances))),
                ("hdc_gridding", "yes" if hdc.gridding else "no")]
    block = structured("analyze", machine)
    ctx.say()
    ctx.say(block.rstrip())
    write_text(ctx.path("analyze.txt"), block)
    plot_parameter_breakdown([(k, v) for k, v in breakdown.items() if v], ctx.path("analyze_params.png"))
    return 0


TAPS = ("fea_pre", "fea_post", "dfb_branch", "dfb_out")


def cmd_viz(ctx: Context) -> int:
    from . import tensor as T
    from .model import preprocess
    from .plotting import dump_average_feature_map, plot_feature_panels
    from .synth import load_dataset
    from .tensor import Tensor
    a = ctx.args
    model, _ = _load_for_inference(ctx, a.checkpoint)
    ds = load_dataset(_dataset_root(ctx), a.split)
    if not 0 <= a.index < len(ds):
        raise DataError(f"--index {a.index} outside [0, {len(ds)})")
    sample = ds.load(a.index)
    model.eval()
    with T.no_grad():
        model.features(Tensor(preprocess([sample.image], dtype=model.dtype)))
    fea = model.ffp.laterals[a.level - 3]
    dfb = [m for m in model.ffp.smooth if hasattr(m, "taps")]
    maps = {}
    for tap in a.tap or TAPS:
        if tap.startswith("fea"):
            if not getattr(fea, "taps", None):
                raise ConfigError("this model has no attention laterals (ffp.fea = false)")
            maps[tap] = fea.taps[tap.split("_")[1]]
        else:
            if not dfb:
                raise ConfigError("this model has no dilated bottleneck (no 'dfb' in ffp.placement)")
            maps[tap] = dfb[-1].taps[tap.split("_")[1]]
    out = ctx.path(a.out)
    rows = []
    for tap, m in maps.items():
        p = os.path.join(out, f"{tap}.pgm")
        os.makedirs(out, exist_ok=True)
        gray = dump_average_feature_map(m, p)
        rows.append((tap, f"{m.shape[2]}x{m.shape[3]}", f"{gray.mean():.2f}", os.path.relpath(p, ctx.workdir)))
    plot_feature_panels(maps, os.path.join(out, "feature_maps.png"), image=sample.image)
    ctx.say(table(rows, ["tap", "size", "mean_gray", "file"]))
    write_text(os.path.join(out, "viz.txt"),
               structured("viz", [(f"{r[0]}_file", r[3]) for r in rows] + [("image", sample.image_id)]))
    return 0


def cmd_check(ctx: Context) -> int:
    from . import checks
    a = ctx.args
    results = list(checks.run_fast_checks())
    # criterion 7 on a small generated split with a freshly initialised model
    bench_dir = ctx.path("check_bench")
    code = main(["synth", "--workdir", bench_dir, "--quiet", "--train", "1", "--test", "4",
                 "--set", "scene.width=176", "--set", "scene.height=128"])
    if code == 0:
        sub = _parse(["bench", "--workdir", bench_dir, "--quiet", "--init", "--with-nms",
                      "--stress-boxes", "10000", "--limit", "4"])
        bctx = Context(sub)
        cmd_bench(bctx)
        results.append(checks.nms_overhead(bctx.bench_report))
    results.append(checks.determinism(main))
    if a.full:
        results += checks.desk_scale(ctx.path("desk"), log=None if ctx.quiet else ctx.say)
    results.sort(key=lambda r: r.number)
    for r in results:
        print(r.line(), flush=True)
    write_text(ctx.path("check.txt"),
               structured("check", [(f"criterion_{r.number}_{r.name.replace(' ', '_')}",
                                     "pass" if r.passed else "fail") for r in results]))
    return 0 if all(r.passed for r in results) else 1


# ----------------------------------------------------------------------
# parser

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--workdir", default=".", help="base directory for every relative path (default: .)")
    p.add_argument("--config", help="sectioned config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable; wins over --config)")
    p.add_argument("--seed", type=int, help="seed for scene generation and training")
    p.add_argument("--quiet", action="store_true", help="suppress tables and progress output")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="ffpdet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--preset", choices=["bogie_key", "dust_collector", "fastening_bolt"])
    p.add_argument("--train", type=int, default=2000, help="training images (default 2000)")
    p.add_argument("--test", type=int, default=500, help="test images (default 500)")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--out", help="dataset directory (default: train.dataset)")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--data", help="dataset directory (default: train.dataset)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", metavar="CKPT", help="continue from a full training checkpoint")
    p.add_argument("--schedule", choices=["desk", "paper"], default="desk",
                   help="desk: config values (5K iterations); paper: batch 16, lr 5e-5, 80K iterations")
    p.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("eval", cmd_eval, "image-level CDR/FDR/MDR on a split"),
                            ("bench", cmd_bench, "latency, memory and model size")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", help="weights file (default: model.ckpt)")
        p.add_argument("--data", help="dataset directory (default: train.dataset)")
        p.add_argument("--split", default="test", choices=["train", "test"])
        p.add_argument("--with-nms", action="store_true", help="apply baseline NMS after decoding")
        p.add_argument("--limit", type=int, help="use only the first N images")
        p.add_argument("--out", default=name, help=f"output directory (default: {name})")
        p.set_defaults(fn=fn)
        if name == "eval":
            p.add_argument("--score-threshold", type=float)
            p.add_argument("--image-threshold", type=float)
            p.add_argument("--workers", type=int, default=1,
                           help="parallel worker processes for accuracy-only runs (default 1)")
        else:
            p.add_argument("--stress-boxes", type=int, default=0, metavar="N",
                           help="add N random candidates per image before NMS")
            p.add_argument("--repetitions", type=int, default=1)
            p.add_argument("--warmup", type=int, default=1)
            p.add_argument("--init", action="store_true", help="benchmark a freshly initialised model")
            p.set_defaults(limit=20)

    p = sub.add_parser("analyze", parents=[common], help="parameter table and dilation-rate check")
    p.add_argument("--rates", help="comma-separated dilation rates (default: ffp.dilation_rates)")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--depth", type=int, default=2, help="module nesting depth of the table")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("viz", parents=[common], help="average feature maps around FEA and DFB")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--tap", action="append", choices=TAPS)
    p.add_argument("--level", type=int, default=3, choices=[3, 4, 5], help="pyramid level of the FEA taps")
    p.add_argument("--out", default="viz")
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("check", parents=[common], help="run the acceptance criteria")
    p.add_argument("--full", action="store_true", help="also run the trained desk-scale criteria (slow)")
    p.set_defaults(fn=cmd_check)
    return parser


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    return build_parser().parse_args(list(argv))


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        with thread_limit():
            return args.fn(Context(args))
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"ffpdet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"ffpdet {args.command}: training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
