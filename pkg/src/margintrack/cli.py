"""margintrack command line.

Exit codes:
    0  success
    1  run failed (training diverged); completed epochs stay on disk
    2  invalid configuration
    3  dataset missing or unreadable
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import idx
from .config import ConfigInvalid, config_to_dict, load_config
from .harness import RunFailed, run_experiment
from .report import RunWriter, parse_timeseries, run_id

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _load_data(root):
    return idx.load_split(root, "train"), idx.load_split(root, "test")


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    data_dir = Path(cfg.data_root) / cfg.dataset
    try:
        train, test = _load_data(data_dir)
    except (idx.DataMissing, idx.IdxError) as exc:
        print(f"dataset problem in {data_dir}: {exc}", file=sys.stderr)
        return EXIT_DATA
    cfg_dict = config_to_dict(cfg)
    checksums = idx.file_checksums(data_dir)
    out = Path(args.out) if args.out else Path("runs") / run_id(cfg_dict, checksums)[:12]
    writer = RunWriter(out, cfg_dict, checksums)
    latest = {}

    def on_epoch(entry, runlog):
        latest["log"] = runlog
        writer.on_epoch(entry, runlog)
        if not args.quiet:
            s = entry.stats["train"].all
            print(f"epoch {entry.epoch}: train_err={entry.train_error:.4f} test_err={entry.test_error:.4f} "
                  f"d2={s.d2_avg} dinf={s.dinf_avg}", flush=True)

    try:
        runlog = run_experiment(cfg, train, test, on_epoch)
    except idx.SampleTooLarge as exc:
        writer.finish("failed", latest.get("log"), str(exc))
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailed as exc:
        writer.finish("failed", latest.get("log"), str(exc))
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    writer.finish("complete", runlog)
    print(writer.out)
    return EXIT_OK


def cmd_verify_data(args) -> int:
    root = Path(args.dir)
    try:
        train, test = _load_data(root)
    except (idx.DataMissing, idx.IdxError) as exc:
        print(f"{root}: {exc}", file=sys.stderr)
        return EXIT_DATA
    for ds in (train, test):
        print(f"{ds.split_tag}: {len(ds)} images of {ds.images.shape[1]}x{ds.images.shape[2]}")
    for name, digest in idx.file_checksums(root).items():
        print(f"sha256 {digest}  {name}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    run_dir = Path(args.run_dir)
    ts = run_dir / "timeseries.csv"
    if not ts.is_file():
        print(f"no timeseries.csv in {run_dir}", file=sys.stderr)
        return EXIT_DATA
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("export-plots needs matplotlib (pip install 'artifact[plots]')", file=sys.stderr)
        return EXIT_RUN_FAILED
    rows = parse_timeseries(ts.read_text())
    epochs = [r["epoch"] for r in rows]
    out = run_dir / "plots"
    out.mkdir(exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["train_error"] for r in rows], label="train")
    ax.plot(epochs, [r["test_error"] for r in rows], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("error")
    ax.legend()
    fig.savefig(out / "error.svg")
    plt.close(fig)

    for norm, key in (("l2", "d2_avg"), ("linf", "dinf_avg")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for split in ("train", "test"):
            for sub in ("all", "correct", "incorrect"):
                ys = [getattr(r["stats"][split].group(sub), key) for r in rows]
                ys = [float("nan") if y is None else y for y in ys]
                ax.plot(epochs, ys, label=f"{split}/{sub}", linestyle="-" if split == "train" else "--")
        ax.set_xlabel("epoch")
        ax.set_ylabel(f"mean {norm} margin")
        ax.legend(fontsize="small")
        fig.savefig(out / f"margin_{norm}.svg")
        plt.close(fig)
    print(out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="margintrack", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and track margins as configured")
    r.add_argument("config", help="YAML config file")
    r.add_argument("--out", help="artifact directory (default runs/<run id prefix>)")
    r.add_argument("-q", "--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("export-plots", help="render SVG line charts from a run directory")
    e.add_argument("run_dir")
    e.set_defaults(func=cmd_export_plots)

    v = sub.add_parser("verify-data", help="parse the four IDX files in a directory")
    v.add_argument("dir")
    v.set_defaults(func=cmd_verify_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
