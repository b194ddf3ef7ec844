"""toolwear command line: synth, train, eval, predict."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, load_config, parse_config
from .formats import FormatError, atomic_write, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .nn.optim import NumericError
from .nn.train import TrainingError
from .pipeline import run_evaluation, run_training, synthesize
from .rul import EvalReport, clamp_fraction, predict_run, rul_fraction, windowed_predict

log = logging.getLogger("toolwear")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_COMPAT, EXIT_TRAIN = 0, 1, 2, 3, 4, 5


class CompatibilityError(ValueError):
    pass


class NotFoundError(LookupError):
    pass


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "split_before_augment", False):
        overrides["spectrogram.split_before_augment"] = True
    if getattr(args, "pool", None):
        overrides["nn.pool_kind"] = args.pool
    if getattr(args, "norm", None):
        overrides["nn.norm_kind"] = args.norm
    return cfg.with_overrides(**overrides) if overrides else cfg


def _fit_to_data(cfg: PipelineConfig, items, n_total: int) -> PipelineConfig:
    """The dataset header fixes run count and frames; bins must agree with the config."""
    B, N = items[0].shape
    if B != cfg.input_bins:
        raise FormatError(6, f"dataset has {B} frequency bins, config expects {cfg.input_bins}")
    return cfg.with_overrides(**{"scene.n_total": n_total, "spectrogram.frames_per_run": N})


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)

    def progress(done, total):
        if done % 25 == 0 or done == total:
            log.info("synthesized %d/%d runs", done, total)

    items = synthesize(cfg, workers=args.workers, progress=progress)
    save_dataset(out, items, cfg.scene.n_total)
    B, N = items[0].shape
    mats = [s.material for s in items]
    print(f"wrote {out}: {len(items)} runs, {B} bins x {N} frames, "
          f"sensor {cfg.scene.sensor_pos}, C45 {mats.count('C45')} / Chromoly {mats.count('Chromoly')}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    items, n_total = load_dataset(args.data)
    cfg = _fit_to_data(cfg, items, n_total)
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else _sibling(out, ".metrics.csv")
    rows = []

    def on_epoch(m):
        rows.append(m)
        print(f"epoch {m.epoch:3d}  train {m.train_loss:.6f}  val {m.val_loss:.6f}", flush=True)

    ckpt = run_training(items, cfg, on_epoch)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "train_loss", "val_loss"])
    for m in rows:
        wr.writerow([m.epoch, repr(m.train_loss), repr(m.val_loss)])
    atomic_write(metrics_path, buf.getvalue())
    save_checkpoint(out, ckpt)
    print(f"best epoch {ckpt.epoch}, val loss {ckpt.val_loss:.6g}; wrote {out} and {metrics_path}")
    return EXIT_OK


def _check_compatible(ckpt_arch, cfg_arch):
    if ckpt_arch != cfg_arch:
        raise CompatibilityError(
            "checkpoint architecture does not match config\n"
            f"  checkpoint: {json.dumps(ckpt_arch.to_dict(), sort_keys=True)}\n"
            f"  config:     {json.dumps(cfg_arch.to_dict(), sort_keys=True)}")


def write_svg(report: EvalReport, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = np.array([r.run for r in report.runs])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for attr_mean, attr_std, label in (("mean_err_single", "std_err_single", "single"),
                                       ("mean_err_win", "std_err_win", f"window {report.window}")):
        m = np.array([getattr(r, attr_mean) for r in report.runs])
        s = np.array([getattr(r, attr_std) for r in report.runs])
        ax.plot(runs, m, marker=".", lw=1, label=label)
        ax.fill_between(runs, m - s, m + s, alpha=0.2)
    ax.axhline(0, color="k", lw=0.5)
    ax.set_xlabel("run")
    ax.set_ylabel("error [% of tool life]")
    ax.legend()
    fig.tight_layout()
    buf = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "toolwear", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def cmd_eval(args) -> int:
    cfg = _config(args)
    items, n_total = load_dataset(args.data)
    cfg = _fit_to_data(cfg, items, n_total)
    ckpt = load_checkpoint(args.checkpoint)
    _check_compatible(ckpt.model.arch, cfg.architecture())
    report = run_evaluation(ckpt.model, items, cfg, n_total)
    out = Path(args.out)
    plot_path = Path(args.plot) if args.plot else _sibling(out, ".plot.csv")
    atomic_write(out, report.to_csv())
    atomic_write(plot_path, report.plot_csv())
    if args.svg:
        write_svg(report, args.svg)
    w = report.window
    print(f"test runs {len(report.runs)}, items {len(report.errors_single)}")
    print(f"max |mean error| %: single {report.max_abs_error_pct_single:.4f}, "
          f"win{w} {report.max_abs_error_pct_win:.4f}")
    print(f"max |item error| %: single {report.max_abs_item_error_pct_single:.4f}, "
          f"win{w} {report.max_abs_item_error_pct_win:.4f}")
    print(f"mean |error| %: single {report.mean_abs_error_pct_single:.4f}, "
          f"win{w} {report.mean_abs_error_pct_win:.4f}")
    print(f"error variance: single {report.var_single:.4f}, win{w} {report.var_win:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    items, n_total = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    arch = ckpt.model.arch
    if items[0].shape != (arch.input_bins, arch.input_frames):
        raise CompatibilityError(f"dataset spectrograms are {items[0].shape}, checkpoint expects "
                                 f"{(arch.input_bins, arch.input_frames)}")
    by_run = {s.run_label: s for s in items}
    if args.run not in by_run:
        raise NotFoundError(f"run {args.run} not in dataset (runs {min(by_run)}..{max(by_run)})")
    w = cfg.eval.window
    single = predict_run(ckpt.model, by_run[args.run])
    win = windowed_predict(ckpt.model, items, args.run, w, n_total)
    raw = float(rul_fraction(win, n_total))
    print(f"run {args.run}")
    print(f"pred_single {single:.4f}")
    print(f"pred_win{w} {win:.4f}")
    print(f"rul_fraction {float(clamp_fraction(raw)):.4f}")
    print(f"rul_fraction_raw {raw:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toolwear", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML pipeline config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the top-level seed")

    sp = sub.add_parser("synth", help="synthesize a spectrogram dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, help="processes (default TOOLWEAR_THREADS or CPU count)")
    sp.set_defaults(func=cmd_synth)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        sp = sub.add_parser(name, help=f"{name} on a dataset")
        common(sp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--split-before-augment", action="store_true")
        sp.add_argument("--pool", choices=("max", "avg"))
        sp.add_argument("--norm", choices=("layer", "batch"))
        sp.set_defaults(func=func)
        if name == "train":
            sp.add_argument("--metrics", help="per-epoch CSV (default <out>.metrics.csv)")
        else:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--plot", help="plot-data CSV (default <out>.plot.csv)")
            sp.add_argument("--svg", help="also write an SVG error plot")

    sp = sub.add_parser("predict", help="predict one run")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--run", type=int, required=True)
    sp.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "synth" else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, NotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CompatibilityError as exc:
        print(f"compatibility error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (TrainingError, NumericError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
