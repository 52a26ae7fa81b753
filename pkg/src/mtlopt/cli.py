"""Command line interface: run, sweep, validate, selftest, report.

Exit codes: 0 success, 1 config/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import sys
from pathlib import Path

import numpy as np

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mtlopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="execute one experiment")
    p_run.add_argument("config", type=Path)
    p_run.add_argument("--seed", type=int, default=None, help="override run.seed")
    p_run.add_argument("--out", type=Path, default=None, help="output directory")

    p_sweep = sub.add_parser("sweep", help="run one config over a parameter grid")
    p_sweep.add_argument("config", type=Path)
    p_sweep.add_argument("--param", required=True,
                         help="section.key=v1,v2,... (one run per value)")
    p_sweep.add_argument("--out", type=Path, default=None)

    p_val = sub.add_parser("validate", help="check a config file")
    p_val.add_argument("config", type=Path)

    sub.add_parser("selftest", help="run the built-in oracle and property battery")

    p_rep = sub.add_parser("report", help="summarize finished run directories")
    p_rep.add_argument("run_dirs", nargs="+", type=Path)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    from .harness import ConfigError

    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "selftest":
            return _cmd_selftest()
        if args.command == "report":
            return _cmd_report(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def _load(args):
    from .harness import build_run_config, parse_config_text

    raw = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
    if getattr(args, "seed", None) is not None:
        raw.setdefault("run", {})["seed"] = int(args.seed)
    return raw, build_run_config(raw)


def _cmd_run(args) -> int:
    from .harness import build_run_config, run_experiment

    raw, cfg = _load(args)
    out = args.out if args.out is not None else Path("runs") / args.config.stem
    record = run_experiment(build_run_config(raw), out_dir=out)
    accepted = sum(1 for t in record.teleports if t.accepted)
    print(f"run complete: {len(record.steps)} steps, "
          f"{len(record.teleports)} teleport attempts ({accepted} accepted)")
    print(f"outputs in {out}")
    return 0


def _cmd_sweep(args) -> int:
    from .harness import ConfigError, build_run_config, run_experiment

    raw, _ = _load(args)
    spec = args.param
    if "=" not in spec or "." not in spec.split("=", 1)[0]:
        raise ConfigError("sweep --param must look like section.key=v1,v2,...")
    key_path, values_text = spec.split("=", 1)
    section, key = key_path.split(".", 1)
    from .harness import _parse_value  # strict value grammar shared with configs

    values = _parse_value(values_text)
    if not isinstance(values, list):
        values = [values]
    base_out = args.out if args.out is not None else Path("runs") / f"{args.config.stem}-sweep"
    for value in values:
        raw_i = copy.deepcopy(raw)
        raw_i.setdefault(section, {})[key] = value
        cfg_i = build_run_config(raw_i)
        out_i = Path(base_out) / f"{section}.{key}={value}"
        run_experiment(cfg_i, out_dir=out_i)
        print(f"sweep point {section}.{key} = {value} -> {out_i}")
    return 0


def _cmd_validate(args) -> int:
    _load(args)
    print("config ok")
    return 0


def _cmd_report(args) -> int:
    rows = []
    for run_dir in args.run_dirs:
        metrics = {}
        path = Path(run_dir) / "metrics.csv"
        for line in path.read_text(encoding="utf-8").splitlines()[1:]:
            name, value = line.split(",", 1)
            metrics[name] = float(value)
        rows.append((str(run_dir), metrics))

    for name, metrics in rows:
        print(f"== {name}")
        losses = [v for k, v in sorted(metrics.items()) if k.startswith("final_loss_")]
        print("   final losses: " + ", ".join(f"{v:.6g}" for v in losses))
        if "delta_m_percent" in metrics:
            print(f"   delta_m%: {metrics['delta_m_percent']:+.4f}")
        print(f"   stationarity gap: {metrics.get('final_stat_gap', float('nan')):.3e}")

    if len(rows) >= 2:
        from .metrics import MetricTable, mean_rank

        k = len([1 for key in rows[0][1] if key.startswith("final_loss_")])
        values = np.array([[m[f"final_loss_{t}"] for t in range(k)] for _, m in rows])
        table = MetricTable([n for n, _ in rows], values, np.zeros(k, dtype=bool))
        for (name, _), mr in zip(rows, mean_rank(table)):
            print(f"mean rank {name}: {mr:.3f}")
    return 0


def _cmd_selftest() -> int:
    """Quick oracle battery: prints one PASS/FAIL line per check."""
    from . import selftest

    return selftest.run()


if __name__ == "__main__":
    raise SystemExit(main())
