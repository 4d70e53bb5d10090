"""Command line entry point: ``sdcil {run,oracle,gradcheck,gen-data,sweep}``.

Exit codes
    0  success
    2  configuration error (bad key, bad value, unreadable file, unwritable output)
    3  numeric abort during training
    4  gradient check above threshold
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import generate_samples, load_dataset, save_dataset, split_tasks, generate_synthetic_stream
from .gradcheck import LOSSES, THRESHOLD, run_gradcheck
from .trainer import EXPERIMENTS, NumericalAbort, RunReport, run_cil

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4
CSV_COLUMNS = ("session", "task_j", "accuracy", "A_last", "A_avg", "wall_ms", "seed")

log = logging.getLogger("sdcil")


# -- artifacts -----------------------------------------------------------------


def build_stream(cfg: RunConfig):
    if cfg.dataset:
        try:
            x, y = load_dataset(cfg.dataset)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load dataset: {exc}", key="dataset") from None
        return split_tasks(x, y, cfg.tasks, cfg.seed)
    return generate_synthetic_stream(cfg.synth_spec(), cfg.tasks)


def session_rows(report: RunReport) -> list[list]:
    rows = []
    means = []
    for t, accs in enumerate(report.accuracy, start=1):
        means.append(sum(accs) / len(accs))
        a_last, a_avg = means[-1], sum(means) / len(means)
        for j, a in enumerate(accs, start=1):
            rows.append([t, j, a, a_last, a_avg, report.wall_ms[t - 1], report.seed])
    return rows


def render_csv(report: RunReport) -> str:
    buf = io.StringIO()
    buf.write(f"# config_fingerprint={report.fingerprint}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in session_rows(report):
        writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_run_artifacts(out: Path, cfg: RunConfig, report: RunReport, learner) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config_fingerprint": cfg.fingerprint(), "config": cfg.to_text().splitlines(), **report.to_dict()}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "sessions.csv").write_text(render_csv(report))
    learner.store.save(out / "stats.sdcs", fingerprint=cfg.fingerprint())
    learner.backbone.save(out / "weights.sdcw", fingerprint=cfg.fingerprint())


def execute(cfg: RunConfig, oracle: bool = False, sigmas=(), timing: bool = False):
    return run_cil(
        build_stream(cfg),
        cfg.backbone_config(),
        cfg.train_config(),
        cfg.ablation(),
        cfg.pretrain_mode,
        fingerprint=cfg.fingerprint(),
        oracle=oracle,
        oracle_sigmas=tuple(sigmas),
        record_timing=timing,
    )


def oracle_summary(cells: list[dict]) -> dict:
    if not cells:
        return {"cells": 0, "win_rate": None, "mean_error_reduction": None}
    comp = np.array([c["err_compensated"] for c in cells])
    unc = np.array([c["err_uncompensated"] for c in cells])
    prev = np.array([c["err_previous"] for c in cells])
    return {
        "cells": len(cells),
        "win_rate": float(np.mean(comp < unc)),
        "mean_error_reduction": float(np.mean(unc - comp)),
        "win_rate_vs_previous": float(np.mean(comp <= prev)),
        "mean_err_compensated": float(comp.mean()),
        "mean_err_uncompensated": float(unc.mean()),
    }


# -- commands ------------------------------------------------------------------


def _emit(args, human: str, machine: dict) -> None:
    if args.quiet:
        print(json.dumps(machine, sort_keys=True))
    else:
        print(human)


def cmd_run(args) -> int:
    base = load_config(args.config, args.set, args.preset)
    out = Path(args.out)
    if args.ablate is None:
        jobs = [(None, base)]
    elif args.ablate == "all":
        jobs = [(name, base.with_ablation(ab)) for name, ab in EXPERIMENTS.items()]
    else:
        jobs = [(args.ablate, base.with_ablation(EXPERIMENTS[args.ablate]))]
    summary = {}
    for name, cfg in jobs:
        report, learner = execute(cfg, timing=args.timing)
        target = out if name is None else out / name
        try:
            write_run_artifacts(target, cfg, report, learner)
        except OSError as exc:
            raise ConfigError(f"cannot write artifacts: {exc}", source=str(target)) from None
        summary[name or report.ablation] = {"A_last": report.A_last, "A_avg": report.A_avg, "out": str(target)}
    lines = [f"{k:>28s}  A_last {v['A_last']:6.2f}  A_avg {v['A_avg']:6.2f}  -> {v['out']}" for k, v in summary.items()]
    _emit(args, "\n".join(lines), summary)
    return EXIT_OK


def cmd_oracle(args) -> int:
    base = load_config(args.config, args.set, args.preset)
    if base.dataset:
        raise ConfigError("the oracle needs synthetic data (dataset must be empty)", key="dataset")
    sigmas = [float(s) for s in args.sweep_sigma.split(",")] if args.sweep_sigma else []
    cells = []
    for k in range(args.seeds):
        cfg = load_config(args.config, list(args.set) + [f"seed={base.seed + k}"], args.preset)
        report, _ = execute(cfg, oracle=True, sigmas=sigmas)
        for cell in report.oracle:
            cells.append({"seed": cfg.seed, **cell})
    summary = oracle_summary(cells)
    summary["config_fingerprint"] = base.fingerprint()
    if sigmas:
        sens = {}
        for c in sorted({cell["class"] for cell in cells if "sigma_sweep" in cell}):
            mine = [cell["sigma_sweep"] for cell in cells if cell["class"] == c and "sigma_sweep" in cell]
            sens[str(c)] = {repr(s): float(np.mean([m[repr(s)] for m in mine])) for s in sigmas}
        summary["sigma_sensitivity"] = sens
    if args.out:
        path = Path(args.out)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"summary": summary, "cells": cells}, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise ConfigError(f"cannot write oracle report: {exc}", source=str(path)) from None
    human = (
        f"cells {summary['cells']}  win rate {summary['win_rate']:.3f}  "
        f"mean error reduction {summary['mean_error_reduction']:.5f}"
        if summary["cells"]
        else "no (class, session) cells: the stream has a single task"
    )
    _emit(args, human, summary)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    errs = run_gradcheck(seed=args.seed, corrupt=args.corrupt)
    elapsed = time.perf_counter() - start
    bad = [k for k, v in errs.items() if not v < THRESHOLD]
    human = "\n".join(f"{k:>14s}  {v:.3e}  {'FAIL' if k in bad else 'ok'}" for k, v in errs.items())
    _emit(args, human + f"\n{'elapsed':>14s}  {elapsed:.2f}s", {"errors": errs, "threshold": THRESHOLD})
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set, args.preset)
    x, y = generate_samples(cfg.synth_spec())
    try:
        save_dataset(args.out, x, y)
    except OSError as exc:
        raise ConfigError(f"cannot write dataset: {exc}", source=str(args.out)) from None
    _emit(args, f"wrote {len(y)} samples, {x.shape[1]} features, {cfg.classes} classes -> {args.out}",
          {"samples": len(y), "dim": int(x.shape[1]), "classes": cfg.classes, "out": str(args.out)})
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.set, args.preset)
    values = [float(v) for v in args.values.split(",")]
    rows = []
    for v in values:
        cfg = load_config(args.config, list(args.set) + [f"{args.param}={v!r}"], args.preset)
        report, _ = execute(cfg, oracle=args.param == "sigma" and not cfg.dataset)
        row = {"param": args.param, "value": v, "A_last": report.A_last, "A_avg": report.A_avg}
        if report.oracle:
            s = oracle_summary(report.oracle)
            row.update(win_rate=s["win_rate"], mean_error_reduction=s["mean_error_reduction"])
        rows.append(row)
        log.info("%s=%s A_last %.2f", args.param, v, report.A_last)
    cols = ["param", "value", "A_last", "A_avg", "win_rate", "mean_error_reduction"]
    buf = io.StringIO()
    buf.write(f"# config_fingerprint={base.fingerprint()}\n")
    writer = csv.DictWriter(buf, cols, lineterminator="\n", restval="")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        try:
            Path(args.out).write_text(buf.getvalue())
        except OSError as exc:
            raise ConfigError(f"cannot write sweep: {exc}", source=str(args.out)) from None
    _emit(args, buf.getvalue().rstrip(), {"rows": rows})
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="flat key = value config file (all keys optional)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key; repeatable")
    p.add_argument("--preset", default="desk", choices=["desk", "published"], help="defaults the config file builds on")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdcil", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--quiet", "-q", action="store_true", help="stdout carries JSON only; diagnostics stay on stderr")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (results do not depend on it)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train over the task stream and write report, CSV and snapshots")
    _config_args(p)
    p.add_argument("--out", "-o", required=True, help="output directory")
    p.add_argument("--ablate", choices=["all", *EXPERIMENTS], help="run one ablation row, or all five")
    p.add_argument("--timing", action="store_true", help="record wall-clock times (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="score compensated prototypes against true class means")
    _config_args(p)
    p.add_argument("--seeds", type=int, default=1, help="consecutive seeds starting at the config seed")
    p.add_argument("--sweep-sigma", help="comma-separated kernel widths for a per-class sensitivity table")
    p.add_argument("--out", "-o", help="write the full per-cell report as JSON")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", choices=LOSSES, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write the synthetic samples as a binary dataset file")
    _config_args(p)
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sweep", help="grid over sigma or lam, plot-ready CSV")
    _config_args(p)
    p.add_argument("--param", choices=["sigma", "lam"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", "-o", help="CSV path (stdout otherwise)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
