"""Command-line front end: ``mnartri {ingest,run,sweep,verify,rq1}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure (including any failed seed).
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import datasets, experiment
from .core import PointwiseLoss, RatingDataset
from .datasets import RatingHistogram, kl_both_directions, write_canonical
from .errors import (
    DegeneratePriorError,
    DivisionHazardError,
    EmptyDataError,
    EmptyPseudoSetError,
    InvalidInputError,
    MissingInputError,
    ParseError,
    TrainingDivergedError,
)
from .evaluation import comparison_table, metrics_row, write_metrics_csv, write_table_csv
from .synthetic import generate, verify_bounds
from .tritrain import TRACE_FIELDS, write_traces_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
AGGREGATE_FIELDS = ("dataset", "propensity", "method", "metric", "mean", "stderr", "n_seeds", "n_failed")
VERIFY_FIELDS = ("trials", "delta_conf", "ips_fraction", "ips_exact_max_bias",
                 "ips_misspecified_fraction", "pseudo_fraction")

DATA_ERRORS = (FileNotFoundError, IsADirectoryError, ParseError, EmptyDataError, MissingInputError,
               DegeneratePriorError)
NUMERIC_ERRORS = (TrainingDivergedError, EmptyPseudoSetError, DivisionHazardError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(value):
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return value


def _write_csv(path, fields, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _output_dir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


# --------------------------------------------------------------------------
# commands


def _histogram_line(name, ds):
    counts = RatingHistogram.from_dataset(ds).counts.astype(int).tolist()
    return f"{name}: " + " ".join(f"{r}:{c}" for r, c in zip(range(1, 6), counts))


def cmd_ingest(cfg, out: Path) -> int:
    bundle = experiment.load_bundle(cfg)
    for name in ("train", "validation", "test"):
        write_canonical(getattr(bundle, name), out / f"{name}.txt")
    observed = _merge(bundle.train, bundle.validation)
    kl = kl_both_directions(observed, bundle.test)
    lines = [
        f"dataset: {cfg.dataset}",
        f"m={bundle.train.m} n={bundle.train.n}",
        f"train={len(bundle.train)} validation={len(bundle.validation)} test={len(bundle.test)}",
        "rating histograms",
        _histogram_line("  observed", observed),
        _histogram_line("  test", bundle.test),
        f"KL(test||train)={kl['test||train']:.6f}",
        f"KL(train||test)={kl['train||test']:.6f}",
        "provenance",
    ]
    lines += [f"  {k}: {v}" for k, v in sorted(bundle.provenance.items())]
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _merge(a, b):
    return RatingDataset(a.m, a.n, np.concatenate([a.users, b.users]), np.concatenate([a.items, b.items]),
                         np.concatenate([a.ratings, b.ratings]), user_ids=a.user_ids, item_ids=a.item_ids)


def cmd_run(cfg, out: Path) -> int:
    bundle = experiment.load_bundle(cfg)
    results = experiment.run_seeds(cfg, bundle)
    ok = [r for r in results if r.report is not None]
    failed = [r for r in results if r.error is not None]

    rows = [metrics_row(cfg.dataset, cfg.propensity, cfg.method, r.report) for r in ok]
    write_metrics_csv(out / "metrics.csv", rows)

    agg_rows, table_input = [], {}
    per_metric = {}
    for metric in ("mae", "mse", "ndcg@3"):
        stats = experiment.summarize(row[metric] for row in rows)
        per_metric[metric] = stats
        agg_rows.append({"dataset": cfg.dataset, "propensity": cfg.propensity, "method": cfg.method,
                         "metric": metric, "mean": stats["mean"], "stderr": stats["stderr"],
                         "n_seeds": len(ok), "n_failed": len(failed)})
    _write_csv(out / "aggregate.csv", AGGREGATE_FIELDS, agg_rows)
    table_input[(cfg.dataset, cfg.propensity, cfg.method)] = per_metric
    write_table_csv(out / "table.csv", comparison_table(table_input))

    if cfg.method == "mf_ips_at":
        merged = []
        for r in ok:
            write_traces_csv(out / f"traces_seed{r.seed}.csv", r.traces)
            merged += [dict(seed=r.seed, iteration=t.iteration, term_a=t.term_a, term_b=t.term_b,
                            pseudo_size=t.pseudo_set_size,
                            test_mse=math.nan if t.test_mse is None else t.test_mse) for t in r.traces]
        _write_csv(out / "traces.csv", ("seed",) + TRACE_FIELDS, merged)

    report = [f"dataset={cfg.dataset} propensity={cfg.propensity} method={cfg.method}",
              f"seeds={len(results)} succeeded={len(ok)} failed={len(failed)}"]
    report += [f"failed seed {r.seed}: {r.error}" for r in failed]
    report += [f"{m}: mean={s['mean']:.6f} stderr={s['stderr']:.6f}" for m, s in per_metric.items()]
    text = "\n".join(report) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_sweep(cfg, out: Path) -> int:
    bundle = experiment.load_bundle(cfg)
    rows, best = experiment.sweep(cfg, bundle)
    _write_csv(out / "trials.csv", experiment.SWEEP_FIELDS, rows)
    best_cfg = cfg.replace(l2=best["l2"], dim=best["dim"], epsilon=best["epsilon"])
    header = (f"# best of {len(rows)} trials (trial {best['trial']}), "
              f"selection metric: {cfg.sweep_metric} MSE on the validation split\n")
    (out / "best.cfg").write_text(header + best_cfg.to_text(exclude=("output_dir",)), encoding="utf-8")
    sys.stdout.write(f"best trial {best['trial']}: l2={best['l2']:.3g} dim={best['dim']} "
                     f"epsilon={best['epsilon']:.3g} {cfg.sweep_metric}_val_mse={best['val_metric']:.6f}\n")
    return EXIT_OK if math.isfinite(best["val_metric"]) else EXIT_NUMERIC


def cmd_verify(cfg, out: Path) -> int:
    if cfg.dataset != "synthetic":
        raise UsageError("verify needs the synthetic dataset (set dataset=synthetic and synthetic_* keys)")
    inst = generate(cfg.synthetic_params(), cfg.synthetic_seed)
    summary = verify_bounds(inst, cfg.n_trials, cfg.delta_conf, seed=cfg.data_seed,
                            loss=PointwiseLoss("absolute"), hypothesis_count=cfg.hypothesis_count)
    row = {"trials": summary.trials, "delta_conf": summary.delta_conf,
           "ips_fraction": summary.ips_fraction,
           "ips_exact_max_bias": summary.ips_exact_max_bias,
           "ips_misspecified_fraction": summary.ips_misspecified_fraction,
           "pseudo_fraction": summary.pseudo_fraction}
    _write_csv(out / "verify.csv", VERIFY_FIELDS, [row])
    text = (f"trials={summary.trials} delta={summary.delta_conf}\n"
            f"ips bound (true propensity): pass fraction {summary.ips_fraction:.3f}, "
            f"max bias term {summary.ips_exact_max_bias:.3g}\n"
            f"ips bound (uniform estimate): pass fraction {summary.ips_misspecified_fraction:.3f}\n"
            f"pseudo-label bound: pass fraction {summary.pseudo_fraction:.3f}\n")
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_rq1(cfg, out: Path) -> int:
    if cfg.dataset != "movielens":
        raise UsageError("rq1 needs dataset=movielens")
    raw = datasets.load_movielens(experiment._require(cfg.movielens_path, "movielens_path", "movielens"))
    rows = experiment.rq1(cfg, raw)
    _write_csv(out / "rq1.csv", experiment.RQ1_FIELDS, rows)
    for r in rows:
        sys.stdout.write(f"min_items={r['min_items']:>3} min_propensity={r['min_propensity']:.4f} "
                         f"{r['method']:<10} mse={r['mse_mean']:.4f} relative={r['relative_mse']:.4f}\n")
    return EXIT_NUMERIC if any(r["n_failed"] for r in rows) else EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "rq1": cmd_rq1}


def build_parser():
    parser = _Parser(prog="mnartri", description="Debiased rating prediction experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__ or name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.build(args.config, args.set)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        out = _output_dir(cfg)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidInputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
