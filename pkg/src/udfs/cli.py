"""Command-line entry point: ``udfs <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from .config import FIELD_HELP, RunConfig
from .engine import Rng
from .errors import DataError, DivergedTraining, UdfsError
from .evaluation import (
    CLOSED,
    OPEN_WORLD,
    SCENARIOS,
    ScenarioConfig,
    run_scenario,
    score_closed,
    score_open_world,
    write_report,
)
from .ingest import IngestStats, parse_flow_records, parse_pcap, write_flow_records
from .model import TrainedModel
from .proto import train, write_training_log
from .representation import extract_udfs, write_udfs_dump
from .synth import SynthSpec, write_dataset
from .thresholds import UNKNOWN, calibrate, classify_batch, read_predictions, write_predictions

logger = logging.getLogger("udfs")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _HelpFormatter(argparse.HelpFormatter):
    """Append each flag's default (or "required") unless the help already states it."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "(default" in text or action.default is argparse.SUPPRESS or not action.option_strings:
            return text
        if action.required:
            return text + " (required)"
        if action.default is None:
            return text + " (default: none)"
        if action.default is False:
            return text + " (default: off)"
        return text + " (default: %(default)s)"


def _add_run_config_flags(p: argparse.ArgumentParser, only: tuple | None = None) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file; flags override it")
    defaults = RunConfig()
    for f in fields(RunConfig):
        if only is not None and f.name not in only:
            continue
        default = getattr(defaults, f.name)
        p.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            type=type(default),
            default=None,
            help=f"{FIELD_HELP[f.name]} (default: {default})",
        )


def _run_config(args, only: tuple | None = None) -> RunConfig:
    names = [f.name for f in fields(RunConfig) if only is None or f.name in only]
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        return cfg.with_overrides({n: getattr(args, n, None) for n in names})
    except (KeyError, ValueError, OSError) as exc:
        raise UsageError(f"--config {args.config}: {exc}") from exc


def _workers_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--workers",
        type=int,
        default=os.cpu_count() or 1,
        help="parallel workers for ingest/embedding/classification (default: available cores)",
    )


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="udfs", description="UDFS encrypted-traffic classification pipeline")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="pcap/pcapng files -> FlowRecord JSONL", formatter_class=fmt)
    p.add_argument("pcaps", nargs="+", type=Path, help="capture files, one trace each")
    p.add_argument("--out", type=Path, required=True, help="output FlowRecord JSONL")
    p.add_argument("--label", default=None, help="label for every trace")
    p.add_argument("--label-from-parent", action="store_true", help="use each file's parent directory name as label")
    p.add_argument("--stats", type=Path, default=None, help="write ingest statistics JSON here")
    _workers_flag(p)

    p = sub.add_parser("extract", help="FlowRecord JSONL -> UDFS dump JSONL", formatter_class=fmt)
    p.add_argument("--in", dest="inp", type=Path, required=True, help="FlowRecord JSONL")
    p.add_argument("--out", type=Path, required=True, help="UDFS dump JSONL")
    p.add_argument("--n-max", type=int, default=RunConfig().n_max, help="flows kept per trace")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory", formatter_class=fmt)
    d = SynthSpec()
    p.add_argument("--classes", type=int, default=d.classes, help="known classes")
    p.add_argument("--per-class", type=int, default=d.per_class, help="early-period traces per class")
    p.add_argument("--late-per-class", type=int, default=None, help="late-period traces per class (default: --per-class)")
    p.add_argument("--unknown-classes", type=int, default=d.unknown_classes, help="unseen classes in unknown.jsonl")
    p.add_argument("--unknown-per-class", type=int, default=d.unknown_per_class, help="traces per unseen class")
    p.add_argument("--sigma", type=float, default=d.sigma, help="log-space noise std")
    p.add_argument("--separation", type=float, default=d.separation, help="minimum class separation in sigmas")
    p.add_argument("--drift-delta", type=float, default=d.drift_delta, help="late-period log shift on drifting flows")
    p.add_argument("--seed", type=int, default=d.seed, help="generator seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", help="train encoder + global prototypes", formatter_class=fmt)
    p.add_argument("--in", dest="inp", type=Path, required=True, help="labelled FlowRecord JSONL")
    p.add_argument("--out", type=Path, required=True, help="output model file")
    p.add_argument("--log", type=Path, default=None, help="training log CSV")
    _add_run_config_flags(p)
    _workers_flag(p)

    p = sub.add_parser("calibrate", help="fit per-class adaptive thresholds", formatter_class=fmt)
    p.add_argument("--model", type=Path, required=True, help="trained model file")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="training FlowRecord JSONL")
    p.add_argument("--out", type=Path, default=None, help="calibrated model file (default: overwrite --model)")
    p.add_argument("--table", type=Path, default=None, help="threshold table JSON dump")
    _add_run_config_flags(p, only=("percentile", "alpha", "k_nearest"))
    _workers_flag(p)

    p = sub.add_parser("classify", help="open-set classification of traces", formatter_class=fmt)
    p.add_argument("--model", type=Path, required=True, help="calibrated model file")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="FlowRecord JSONL")
    p.add_argument("--out", type=Path, required=True, help="predictions CSV")
    p.add_argument("--no-reject", action="store_true", help="infinite thresholds (pure closed-set)")
    _workers_flag(p)

    p = sub.add_parser("evaluate", help="score predictions against ground truth", formatter_class=fmt)
    p.add_argument("--pred", type=Path, required=True, help="predictions CSV")
    p.add_argument("--truth", type=Path, required=True, help="FlowRecord JSONL with labels")
    p.add_argument("--scenario", choices=(CLOSED, "drift", OPEN_WORLD), default=CLOSED, help="scoring protocol")
    p.add_argument("--model", type=Path, default=None, help="map truth labels outside the model's classes to Unknown")
    p.add_argument("--exclude-unknown", action="store_true", help="open world: headline macros over known classes only")
    p.add_argument("--out", type=Path, required=True, help="report JSON (a sibling report.csv row is also written)")

    p = sub.add_parser("run-scenario", help="ingest -> train -> calibrate -> classify -> score", formatter_class=fmt)
    p.add_argument("--scenario", choices=SCENARIOS, required=True, help="evaluation protocol")
    p.add_argument("--data", type=Path, default=None, help="synthetic dataset directory (from `synth`)")
    p.add_argument("--train", type=Path, default=None, help="training FlowRecord JSONL")
    p.add_argument("--test", type=Path, default=None, help="test FlowRecord JSONL")
    p.add_argument("--unknown", type=Path, default=None, help="unknown-pool FlowRecord JSONL (open_world)")
    p.add_argument("--boundary", type=int, default=None, help="drift time boundary, epoch seconds (default: from data)")
    p.add_argument("--test-fraction", type=float, default=0.3, help="per-class test share when splitting one file")
    p.add_argument("--no-reject", action="store_true", help="infinite thresholds (pure closed-set)")
    p.add_argument("--exclude-unknown", action="store_true", help="open world: headline macros over known classes only")
    p.add_argument("--out", type=Path, required=True, help="run output directory")
    _add_run_config_flags(p)
    _workers_flag(p)
    return parser


def _ingest_one(job):
    path, trace_id, label = job
    stats = IngestStats()
    return parse_pcap(path, trace_id, label, stats), stats


def cmd_ingest(args) -> None:
    jobs, seen = [], {}
    for path in args.pcaps:
        tid = path.stem
        seen[tid] = seen.get(tid, 0) + 1
        if seen[tid] > 1:
            tid = f"{tid}#{seen[tid]}"
        label = path.resolve().parent.name if args.label_from_parent else args.label
        jobs.append((path, tid, label))
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_ingest_one, jobs))
    else:
        results = [_ingest_one(j) for j in jobs]
    total = IngestStats()
    for _, st in results:
        total.merge(st)
    write_flow_records([t for t, _ in results], args.out)
    if args.stats:
        args.stats.write_text(json.dumps(total.to_dict(), indent=2) + "\n", encoding="utf-8")
    logger.info("ingested %d traces, %d flows", total.traces, total.flows)


def cmd_extract(args) -> None:
    traces = parse_flow_records(args.inp)
    write_udfs_dump((extract_udfs(t, args.n_max) for t in traces), args.out)


def cmd_synth(args) -> None:
    spec = SynthSpec(
        classes=args.classes,
        per_class=args.per_class,
        late_per_class=args.late_per_class,
        unknown_classes=args.unknown_classes,
        unknown_per_class=args.unknown_per_class,
        sigma=args.sigma,
        separation=args.separation,
        drift_delta=args.drift_delta,
        seed=args.seed,
    )
    write_dataset(args.out, spec)
    logger.info("wrote synthetic dataset to %s", args.out)


def _sequences(path: Path, n_max: int):
    return [extract_udfs(t, n_max) for t in parse_flow_records(path)]


def cmd_train(args) -> None:
    run = _run_config(args)
    seqs = _sequences(args.inp, run.n_max)
    model = train(seqs, run.train_config(), Rng(run.seed), run.encoder_config(), workers=args.workers)
    model.seeds["run"] = run.seed
    model.save(args.out)
    if args.log:
        write_training_log(model.history, model.class_ids, args.log)


def cmd_calibrate(args) -> None:
    model = TrainedModel.load(args.model)
    run = _run_config(args, only=("percentile", "alpha", "k_nearest"))
    seqs = _sequences(args.inp, model.encoder_config.n_max)
    table = calibrate(model, seqs, run.percentile, run.alpha, run.k_nearest, workers=args.workers)
    model.save(args.out or args.model)
    if args.table:
        table.dump(args.table)


def cmd_classify(args) -> None:
    model = TrainedModel.load(args.model)
    if model.thresholds is None and not args.no_reject:
        raise DataError(f"{args.model} is not calibrated; run `calibrate` or pass --no-reject")
    seqs = _sequences(args.inp, model.encoder_config.n_max)
    write_predictions(classify_batch(seqs, model, reject=not args.no_reject, workers=args.workers), args.out)


def cmd_evaluate(args) -> None:
    preds = read_predictions(args.pred)
    traces = parse_flow_records(args.truth)
    known = set(TrainedModel.load(args.model).class_ids) if args.model else None
    truth = {}
    for t in traces:
        label = t.label
        if known is not None and label not in known:
            label = UNKNOWN
        truth[t.trace_id] = label
    if args.scenario == OPEN_WORLD:
        report = score_open_world(preds, truth, include_unknown=not args.exclude_unknown)
    else:
        report = score_closed(preds, truth, scenario=args.scenario)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, args.out)


def cmd_run_scenario(args) -> None:
    if args.data is None and args.train is None:
        raise UsageError("run-scenario needs --data or --train")
    cfg = ScenarioConfig(
        scenario=args.scenario,
        out_dir=args.out,
        data_dir=args.data,
        train_path=args.train,
        test_path=args.test,
        unknown_path=args.unknown,
        boundary=args.boundary,
        test_fraction=args.test_fraction,
        no_reject=args.no_reject,
        include_unknown=not args.exclude_unknown,
        run=_run_config(args),
        workers=args.workers,
    )
    report = run_scenario(cfg)
    print(json.dumps(report.csv_row()))


COMMANDS = {
    "ingest": cmd_ingest,
    "extract": cmd_extract,
    "synth": cmd_synth,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "run-scenario": cmd_run_scenario,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"udfs {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedTraining as exc:
        print(f"udfs {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UdfsError, OSError, ValueError) as exc:
        print(f"udfs {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
