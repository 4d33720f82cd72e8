"""Command-line entry point: ``autolstm <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .alc import AlcParams, run_alc
from .data import Dpc, Period, extract_dpc, generate_synthetic, parse_csv, split_days, write_csv
from .distributed import (DEFAULT_HEARTBEAT_TIMEOUT, coordinator_serve, make_jobs,
                          read_jobs, replay_result_log, worker_loop)
from .errors import ConfigurationError, DataError, DomainError, ProtocolError
from .lstm import LstmConfig, calibrate_epoch_times
from .mdp import REFERENCE_EPOCH_TIMES, MdpModel, load_config, value_iteration
from .report import aggregate, persistence_baseline

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _mdp_args(p):
    g = p.add_argument_group("search space")
    g.add_argument("--config", type=Path, help="key = value MDP config file (overrides the flags below)")
    g.add_argument("--n", type=int, default=3, help="maximum hidden layers (default: 3)")
    g.add_argument("--k", type=int, default=100, help="maximum epochs (default: 100)")
    g.add_argument("--e", type=int, default=20, help="epoch increment (default: 20)")
    g.add_argument("--epoch-times", help="comma-separated seconds per epoch for 1..n layers "
                   "(default: reference times)")
    g.add_argument("--alpha", type=float, default=0.5, help="P(more epochs improve) (default: 0.5)")
    g.add_argument("--beta", type=float, default=0.5, help="P(another layer improves) (default: 0.5)")
    g.add_argument("--theta", type=float, default=1.0, help="VI stopping threshold in seconds")


def _lstm_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--hidden-units", type=int, default=32)
    g.add_argument("--learning-rate", type=float, default=1e-3)
    g.add_argument("--window", type=int, default=12, help="input window length (default: 12)")


def _model_from(args):
    if args.config is not None:
        return load_config(args.config)
    if args.epoch_times:
        times = {i + 1: float(t) for i, t in enumerate(args.epoch_times.split(","))}
    else:
        missing = [h for h in range(1, args.n + 1) if h not in REFERENCE_EPOCH_TIMES]
        if missing:
            raise ConfigurationError(f"--epoch-times is required for n > {len(REFERENCE_EPOCH_TIMES)}")
        times = {h: REFERENCE_EPOCH_TIMES[h] for h in range(1, args.n + 1)}
    return MdpModel(n=args.n, k=args.k, e=args.e, epoch_time=times, theta=args.theta,
                    default_alpha=args.alpha, default_beta=args.beta)


def _template(args):
    return LstmConfig(hidden_units=args.hidden_units, learning_rate=args.learning_rate,
                      window_len=args.window)


def cmd_policy(args):
    model = _model_from(args)
    policy = value_iteration(model)
    if args.format == "json":
        doc = {"model": model.to_dict(), "policy": policy.to_dict()}
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    print(f"# value iteration: {policy.iterations} sweeps, final residual "
          f"{policy.residuals[-1]:.3g}")
    print(f"{'h':>3} {'epochs':>7} {'V (s)':>14}  action")
    for s, v in sorted(policy.value.items()):
        action = policy.action[s].value if s in policy.action else "-"
        print(f"{s.h:>3} {s.j * model.e:>7} {v:>14.3f}  {action}")
    return EXIT_OK


def _load_dataset(args):
    records = parse_csv(args.data)
    if not records:
        raise DataError(f"{args.data}: no records")
    train_days, test_days = split_days(records)
    detector = args.detector or records[0].detector_id
    return extract_dpc(records, Dpc(detector, Period(args.period)), train_days, test_days,
                       args.window)


def cmd_calibrate(args):
    if args.data is not None:
        dataset = _load_dataset(args)
    else:
        recs = generate_synthetic(1, 8, args.seed, "bimodalCommute")
        train_days, test_days = split_days(recs)
        dataset = extract_dpc(recs, Dpc(recs[0].detector_id, Period.AM), train_days, test_days,
                              args.window)
    times = calibrate_epoch_times(args.n, dataset, args.probe_epochs, _template(args))
    print(json.dumps({str(h): t for h, t in times.items()}, indent=2))
    print("# epoch_times = " + ",".join(f"{times[h]:.6g}" for h in sorted(times)), file=sys.stderr)
    return EXIT_OK


def cmd_gen_synth(args):
    records = generate_synthetic(args.detectors, args.days, args.seed, args.profile)
    if args.out is None or str(args.out) == "-":
        write_csv(records, sys.stdout)
    else:
        write_csv(records, args.out)
    return EXIT_OK


def cmd_run(args):
    dataset = _load_dataset(args)
    model = _model_from(args)
    params = AlcParams(args.delta, model, value_iteration(model), args.seed, _template(args))
    result = run_alc(dataset, params)
    out = Path(args.out)
    result.outcome.model.save(out)
    doc = result.to_dict()
    doc["dpc"] = {"detector_id": dataset.dpc.detector_id, "period": dataset.dpc.period.value}
    doc["baseline_aare"] = persistence_baseline(dataset)
    doc["model_file"] = out.name
    side = out.with_name(out.stem + ".alc.json")
    side.write_text(json.dumps(doc, indent=2))
    h, epochs = result.chosen_config
    print(f"{dataset.dpc.key}: <{h}, {epochs}> AARE {result.aare:.4f} "
          f"(persistence {doc['baseline_aare']:.4f}), {result.trace.reason.value}, "
          f"{result.trace.training_calls} trainings, {result.total_search_seconds:.1f} s")
    print(f"wrote {out} and {side}")
    return EXIT_OK


def cmd_coordinator(args):
    jobs_path = Path(args.jobs)
    if jobs_path.suffix.lower() == ".csv":
        records = parse_csv(jobs_path)
        train_days, test_days = split_days(records)
        datasets = data_mod.extract_all(records, train_days, test_days, args.window)
        model = _model_from(args)
        params = AlcParams(args.delta, model, value_iteration(model), args.seed, _template(args))
        jobs = make_jobs(datasets, params, args.run_tag, args.seed)
    else:
        jobs = read_jobs(jobs_path)
    if not jobs:
        raise DataError("no jobs to serve")

    def ready(addr):
        print(f"coordinator listening on {addr[0]}:{addr[1]} with {len(jobs)} jobs", flush=True)

    report = coordinator_serve(jobs, args.listen, args.heartbeat_timeout, args.result_log,
                               args.deadline, ready)
    print(f"{len(report.results)}/{len(jobs)} jobs completed, {len(report.assignments)} "
          f"assignments, {len(report.duplicates)} duplicate results discarded")
    if not report.complete:
        print("deadline reached with jobs pending", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_worker(args):
    stats = worker_loop(args.connect, worker_id=args.worker_id)
    print(f"{stats.worker_id}: {len(stats.results)} results, {stats.errors} errors")
    return EXIT_OK


def cmd_report(args):
    results = replay_result_log(args.log)
    if not results:
        raise DataError(f"{args.log}: no results")
    report = aggregate(results.values())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.rows_csv:
        Path(args.rows_csv).write_text(report.rows_csv())
    if args.json:
        Path(args.json).write_text(report.to_json())
    print(f"{'approach':<18} {'n':>4} {'mean AARE':>10} {'std':>10} {'max':>10}")
    for name, agg in report.aggregates.items():
        print(f"{name:<18} {agg['count']:>4} {agg['mean']:>10.4f} {agg['std']:>10.4f} {agg['max']:>10.4f}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="autolstm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("policy", help="solve the search MDP and print V and the policy")
    _mdp_args(p)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_policy)

    p = sub.add_parser("calibrate", help="measure seconds per epoch for 1..n layers")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--probe-epochs", type=int, default=3)
    p.add_argument("--data", type=Path, help="detector CSV (default: synthetic probe)")
    p.add_argument("--detector")
    p.add_argument("--period", choices=("AM", "PM"), default="AM")
    p.add_argument("--seed", type=int, default=0)
    _lstm_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen-synth", help="write synthetic detector CSV")
    p.add_argument("--detectors", type=int, default=4)
    p.add_argument("--days", type=int, default=8, help="number of weekdays (>= 8)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=data_mod.PROFILES, default="bimodalCommute")
    p.add_argument("--out", type=Path, help="output file (default: stdout)")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("run", help="customise one DPC sequentially")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detector", help="detector id (default: first in file)")
    p.add_argument("--period", choices=("AM", "PM"), default="AM")
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("model.json"))
    _mdp_args(p)
    _lstm_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("coordinator", help="serve customisation jobs to workers")
    p.add_argument("--listen", required=True, help="host:port")
    p.add_argument("--jobs", required=True,
                   help="JSON-lines JobSpec file, or a detector CSV to build one job per DPC")
    p.add_argument("--result-log", type=Path, default=Path("results.jsonl"))
    p.add_argument("--heartbeat-timeout", type=float, default=DEFAULT_HEARTBEAT_TIMEOUT)
    p.add_argument("--deadline", type=float, help="give up after this many seconds")
    p.add_argument("--run-tag", default="run")
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    _mdp_args(p)
    _lstm_args(p)
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("worker", help="pull and run jobs from a coordinator")
    p.add_argument("--connect", required=True, help="host:port")
    p.add_argument("--worker-id")
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("report", help="aggregate a result log")
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--csv", type=Path, help="per-approach mean/std CSV")
    p.add_argument("--rows-csv", type=Path, help="per-DPC rows CSV")
    p.add_argument("--json", type=Path, help="plot-ready JSON (rows + per-approach bars)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ProtocolError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
