"""Command line entry point: ``ccsdsim run|compare|calibrate|replay``."""

from __future__ import annotations

import argparse
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Optional, Sequence

from .device import DeviceConfig
from .harness import ConfigError, ExperimentConfig, compare, replay, run
from .scheduler import Scheme
from .thermal import CalibrationError, calibrate, replay_anchors
from .workload import PATTERNS, PROFILES, SyntheticSpec, load_profile, read_trace, write_trace

_ORDERING = re.compile(r"^(?:(\w+):)?\s*(\w+)\s*(>=|<=|==|>|<)\s*(\w+)$")


def parse_workload(name: str, ratio: Optional[float] = None, fill_level: Optional[float] = None, duration: Optional[float] = None):
    """A synthetic pattern, a bundled profile name or a JSON profile path."""
    if name in PATTERNS:
        kw = {}
        if ratio is not None:
            kw["ratio"] = ratio
        if fill_level is not None:
            kw["fill_level"] = fill_level
        if duration is not None:
            kw["duration"] = duration
        return SyntheticSpec(name, **kw)
    if name in PROFILES or name.endswith(".json"):
        over = {}
        if fill_level is not None:
            over["fill_level"] = fill_level
        if duration is not None:
            over["duration"] = duration
        if ratio is not None:
            over["ratio_range"] = (ratio, ratio)
        return load_profile(name, **over)
    raise argparse.ArgumentTypeError(
        f"unknown workload {name!r}; use one of {', '.join(PATTERNS + PROFILES)} or a .json profile"
    )


def parse_ordering(text: str) -> tuple:
    """``[metric:]A op B``; the metric defaults to throughput."""
    m = _ORDERING.match(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"bad ordering {text!r}, expected e.g. 'throughput:Waltzp>=Waltzs'")
    metric, a, op, b = m.groups()
    metric = metric or "throughput"
    if metric not in ("throughput", "waf", "max_temp"):
        raise argparse.ArgumentTypeError(f"unknown metric {metric!r}")
    return metric, Scheme.parse(a).value, op, Scheme.parse(b).value


def _on_off(text: str) -> bool:
    if text.lower() in ("on", "true", "1", "yes"):
        return True
    if text.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on or off")


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workload", help="synthetic pattern, profile name or JSON profile path (default seq-write)")
    p.add_argument("--config", help="JSON experiment config; flags given explicitly override it")
    p.add_argument("--ratio", type=float, help="compression ratio (synthetic) or fixed ratio (profile)")
    p.add_argument("--fill-level", type=float, help="prefill fraction of the partition")
    p.add_argument("--duration", type=float, help="simulated seconds (default: the workload's)")
    p.add_argument("--seed", type=int)
    p.add_argument("--t-soft", type=float)
    p.add_argument("--t-hard", type=float)
    p.add_argument("--osa", type=_on_off, help="on|off (default: on for Waltzs and Waltzp)")
    p.add_argument("--ft-sc", type=float)
    p.add_argument("--ft-c", type=float)
    p.add_argument("--t-step", type=float)
    p.add_argument("--rsr-max", type=float)
    p.add_argument("--algorithm", choices=("zstd", "lz4", "lzo"))
    p.add_argument("--scale", type=float)


_FLAG_FIELDS = ("seed", "t_soft", "t_hard", "osa", "ft_sc", "ft_c", "t_step", "rsr_max", "algorithm", "scale")


def build_config(args: argparse.Namespace, scheme: Optional[str] = None) -> ExperimentConfig:
    if args.config:
        with open(args.config) as fp:
            cfg = ExperimentConfig.from_dict(json.load(fp))
    else:
        cfg = ExperimentConfig()
    over = {name: getattr(args, name) for name in _FLAG_FIELDS if getattr(args, name) is not None}
    if scheme is not None:
        over["scheme"] = scheme
    if args.workload is not None or not args.config:
        over["workload"] = parse_workload(args.workload or "seq-write", args.ratio, args.fill_level, args.duration)
    else:
        extra = {k: v for k, v in (("fill_level", args.fill_level), ("duration", args.duration)) if v is not None}
        if extra:
            over["workload"] = replace(cfg.workload, **extra)
    return replace(cfg, **over).validate()


def _emit(text: str, path: Optional[str]) -> None:
    if path:
        with open(path, "w") as fp:
            fp.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_config(args, args.scheme)
    if args.trace:
        cfg = replace(cfg, record_trace=True)
    report = run(cfg)
    _emit(report.to_json(indent=2) + "\n", args.out)
    if args.series:
        _emit(report.series_csv(), args.series)
    if args.trace:
        write_trace(report.trace or [], args.trace)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    schemes = [Scheme.parse(s).value for s in args.schemes.split(",") if s]
    base = Scheme.parse(args.baseline).value if args.baseline else schemes[0]
    if base not in schemes:
        raise SystemExit(f"baseline {base} is not among the compared schemes")
    configs = [build_config(args, s) for s in schemes]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(run, configs))
    else:
        reports = [run(c) for c in configs]
    result = compare(configs, schemes.index(base), args.check or (), reports)
    if args.json:
        payload = {"baseline": result.baseline, "rows": result.rows, "violations": result.violations}
        _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    else:
        _emit(result.table() + "\n", args.out)
    for v in result.violations:
        print(f"ORDERING VIOLATION: {v}", file=sys.stderr)
    return 1 if result.violations else 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    anchors = [("idle", args.idle), ("io_asymptote", args.io_asymptote), ("emergency_time", args.emergency_time)]
    if args.throttle_time is not None:
        anchors.append(("throttle_time", args.throttle_time))
    elif args.io_time_constant is not None:
        anchors.append(("io_time_constant", args.io_time_constant))
    try:
        params = calibrate(anchors, args.throttle_temp, args.emergency_temp, args.throttled_fraction)
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return 2
    implied = dict(replay_anchors(params, args.throttle_temp, args.emergency_temp, args.throttled_fraction))
    payload = {"params": params.to_dict(), "implied": implied}
    _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    records = read_trace(args.trace)
    cfg = DeviceConfig(capacity=args.capacity) if args.capacity else None
    res = replay(records, cfg)
    payload = {
        "commands": len(records),
        "host_bytes": res.host_bytes,
        "physical_bytes": res.physical_bytes,
        "waf": res.waf,
        "reads": len(res.reads),
    }
    _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccsdsim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and print its JSON report")
    p.add_argument("--scheme", default=None, help=", ".join(s.value for s in Scheme))
    _add_experiment_flags(p)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--series", help="write the per-second series as CSV")
    p.add_argument("--trace", help="record the device command trace to this file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several schemes on one workload and normalise")
    p.add_argument("--schemes", default="Baseline,FPC,TCS,Waltzs,Waltzp")
    p.add_argument("--baseline", help="scheme to normalise against (default: first)")
    _add_experiment_flags(p)
    p.add_argument(
        "--check",
        action="append",
        type=parse_ordering,
        metavar="[METRIC:]A OP B",
        help="ordering to assert, e.g. 'Waltzp>=Waltzs' or 'waf:Waltzs<Baseline'; exit 1 if violated",
    )
    p.add_argument("--jobs", type=int, default=1, help="simulations to run in parallel")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate", help="fit thermal parameters to anchor behaviours")
    p.add_argument("--idle", type=float, default=23.0)
    p.add_argument("--io-asymptote", type=float, default=60.0)
    p.add_argument("--emergency-time", type=float, default=582.0)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--io-time-constant", type=float)
    g.add_argument("--throttle-time", type=float)
    p.add_argument("--throttle-temp", type=float, default=76.0)
    p.add_argument("--emergency-temp", type=float, default=86.0)
    p.add_argument("--throttled-fraction", type=float, default=0.1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("replay", help="feed a recorded command trace into a fresh device")
    p.add_argument("trace")
    p.add_argument("--capacity", type=int, help="device capacity in bytes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
