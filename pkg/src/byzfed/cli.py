"""Command line entry point: ``byzfed run|suite|report``."""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ByzFedError, ConfigInvalid
from .experiments import (
    WORKERS_ENV,
    emit_report,
    load_config,
    record_from_json,
    records_to_csv,
    run_experiment,
    table_suite,
)

EXIT_CONFIG = 2


def _progress(done, total):
    print(f"\r  run {done}/{total}", end="" if done < total else "\n", file=sys.stderr, flush=True)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.timing:
        cfg = replace(cfg, timing=args.timing)
    if args.out:
        cfg = replace(cfg, output=args.out)
    rec = run_experiment(cfg, args.workers, None if args.quiet else _progress)
    if not cfg.output:
        sys.stdout.write(records_to_csv([rec]))
    return 0


def cmd_suite(args) -> int:
    cfgs = table_suite(args.name, args.scale, args.runs, args.seed)
    out = Path(args.out)
    records = []
    for i, cfg in enumerate(cfgs):
        cfg = replace(cfg, timing=args.timing or cfg.timing)
        if not args.quiet:
            print(f"[{i + 1}/{len(cfgs)}] {cfg.label} {cfg.attack} L_byz={cfg.L_byz} T_pow={cfg.T_pow}",
                  file=sys.stderr)
        rec = run_experiment(cfg, args.workers, None if args.quiet else _progress)
        emit_report(rec, out / f"{args.name}_{i:02d}.json", "json")
        records.append(rec)
    emit_report(records, out / f"{args.name}.csv", "csv")
    if not args.quiet:
        print(f"wrote {out / (args.name + '.csv')}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    doc = json.loads(Path(args.record).read_text())
    rec = record_from_json(doc)
    if args.format == "csv":
        sys.stdout.write(records_to_csv([rec]))
    else:
        sys.stdout.write(json.dumps(doc, indent=1) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="byzfed", description="Byzantine-resilient federated PCA and LRCS experiments.")
    p.add_argument("--workers", type=int, default=None,
                   help=f"parallel Monte-Carlo workers (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--quiet", action="store_true", help="no progress output")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a key = value config file")
    r.add_argument("config")
    r.add_argument("--out", help="CSV path (a JSON record is written next to it)")
    r.add_argument("--timing", choices=("off", "wall"), help="override the config's timing mode")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="run a table/figure parameter grid")
    s.add_argument("name", help="exp1, exp2, mom1 or lrcs_fig")
    s.add_argument("--scale", choices=("full", "desk"), default="desk")
    s.add_argument("--runs", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="results")
    s.add_argument("--timing", choices=("off", "wall"), default=None,
                   help="wall records estimator wall time; off (default) keeps CSVs byte-reproducible")
    s.set_defaults(func=cmd_suite)

    rep = sub.add_parser("report", help="re-emit a JSON record")
    rep.add_argument("record")
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ByzFedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
