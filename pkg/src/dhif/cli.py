"""``dhif`` command line: data generation, training, evaluation, checks, analysis, benchmarks.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O or parse
error, 4 training divergence.  ``DHIF_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import config as config_mod
from .errors import DivergedError, DumpParseError
from .metrics import evaluate
from .storage import load_checkpoint, load_mask
from .synth import generate_dataset, load_dataset, write_dataset

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _load_config(path) -> config_mod.Config:
    if path is None:
        return config_mod.Config()
    if not Path(path).exists():
        raise CliError(EXIT_CONFIG, f"{path}: config file not found")
    try:
        return config_mod.load(path)
    except config_mod.ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}") from None


def _datasets(cfg: config_mod.Config):
    d = cfg.data
    return (generate_dataset(d.n_train, cfg.scene, d.seed),
            generate_dataset(d.n_test, cfg.scene, d.seed + 1))


def _split_dir(root: Path, name: str) -> Path:
    """``root/name`` when it holds a dataset, else ``root`` itself."""
    return root / name if (root / name / "manifest.txt").exists() else root


def _load_split(root, name: str):
    path = _split_dir(Path(root), name)
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"{path}: cannot load dataset ({exc})") from None


def _print_metrics(rep, out=sys.stdout) -> None:
    u = rep.table_units()
    print(f"IoU {u['iou']:.2f}  nIoU {u['niou']:.2f}  Pd {u['pd']:.2f}  Fa {u['fa']:.2f}"
          "  (IoU/nIoU/Pd in 1e-2, Fa in 1e-5)", file=out)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    tr, te = _datasets(cfg)
    out = Path(args.out)
    try:
        write_dataset(tr, out / "train")
        write_dataset(te, out / "test")
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    print(f"wrote {len(tr)} training and {len(te)} test scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import save_run, train

    cfg = _load_config(args.config)
    if args.data:
        tr, te = _load_split(args.data, "train"), _load_split(args.data, "test")
    else:
        tr, te = _datasets(cfg)
    tcfg = cfg.train_config()
    log = (lambda r: print(f"epoch {r.epoch:4d}  loss {r.loss:.5f}", flush=True)) if args.verbose else None
    try:
        rep = train(tr, te, tcfg, log=log)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    try:
        written = save_run(rep, tcfg, args.out, sample_image=te.images[0])
        rep.final.write_csv(Path(args.out) / "metrics.csv")
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    _print_metrics(rep.final)
    print(f"report: {written['report']}  checkpoint: {written['checkpoint']}  "
          f"filter banks: {len(written['banks'])}  ({rep.wall_clock:.1f} s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_model, model_from_checkpoint

    cfg = _load_config(args.config)
    te = _load_split(args.data, "test")
    if args.preds:
        pred_dir = Path(args.preds)
        preds = []
        for spec in te.specs:
            path = pred_dir / Path(spec["mask"]).name
            try:
                preds.append(load_mask(path))
            except (OSError, ValueError) as exc:
                raise CliError(EXIT_IO, f"{path}: {exc}") from None
        rep = evaluate(preds, te.masks, cfg.metrics.match_distance)
    else:
        if not args.checkpoint:
            raise CliError(EXIT_CONFIG, "eval needs --checkpoint or --preds")
        try:
            tensors, meta = load_checkpoint(args.checkpoint)
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_IO, f"{args.checkpoint}: {exc}") from None
        net = model_from_checkpoint(tensors, meta)
        x, y = te.arrays(net.dtype)
        rep, _ = evaluate_model(net, x, y, cfg.metrics.threshold, cfg.metrics.match_distance)
    _print_metrics(rep)
    if args.out:
        try:
            rep.write_csv(args.out)
        except OSError as exc:
            raise CliError(EXIT_IO, f"{args.out}: {exc}") from None
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suites

    groups = run_suites(instances=args.instances, full=args.full, seed=args.seed)
    ok = True
    for g in groups:
        status = "ok" if g.passed else "FAIL"
        ok &= g.passed
        print(f"{g.name:20s} {g.instances:3d} instances  max rel err {g.max_error:.3e}  "
              f"skipped {g.skipped:3d}  {status}  (worst {g.worst})")
    print(f"tolerance {TOLERANCE:g}: {'all groups pass' if ok else 'some groups FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_freq(args) -> int:
    from .freq import analyze_bank, analyze_kernel, bank_kernels, write_grid
    from .layer import load_filter_bank

    try:
        stats = analyze_bank(args.bank, args.out)
    except DumpParseError as exc:
        raise CliError(EXIT_IO, f"{args.bank}: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"{args.bank}: {exc.strerror or exc}") from None
    for name in ("dc_gain", "nyquist_gain", "coeff_sum", "highpass_ratio"):
        s = stats[name]
        print(f"{name:15s} min {s['min']:+.4e}  median {s['median']:+.4e}  max {s['max']:+.4e}")
    if args.grid_out:
        kernels = bank_kernels(load_filter_bank(args.bank))
        write_grid(analyze_kernel(kernels[args.filter_index], args.n), args.grid_out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench

    cfg = _load_config(args.config)
    b = cfg.bench
    try:
        res = run_bench(b.batch, b.height, b.width, b.channels, b.kernel_size, b.repeats,
                        net_channels=cfg.train.channels)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    dest = open(args.out, "w", newline="") if args.out else nullcontext(sys.stdout)
    with dest as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for k, v in res.items():
            w.writerow([k, f"{v:.6g}" if isinstance(v, float) else v])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dhif", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic train/test split")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector and write report, checkpoint and filter banks")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="recompute test metrics from a checkpoint or stored predictions")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--preds", help="directory of predicted mask PGMs named like the ground truth")
    e.add_argument("--config")
    e.add_argument("--out", help="metrics CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--full", action="store_true", help="k in {1,3,5}, every coordinate")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("freq-analyze", help="frequency summary of a filter-bank dump")
    f.add_argument("--bank", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--grid-out", help="write the magnitude grid of one filter")
    f.add_argument("--filter-index", type=int, default=0)
    f.add_argument("--n", type=int, default=64)
    f.set_defaults(func=cmd_freq)

    b = sub.add_parser("bench", help="standard conv vs DHiF timing and parameter counts")
    b.add_argument("--config", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def _thread_limit():
    raw = os.environ.get("DHIF_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(EXIT_CONFIG, f"DHIF_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
