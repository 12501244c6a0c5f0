"""``osdn`` command line: ``equiv``, ``replay``, ``theory``, ``bench``.

Every config field has a matching ``--field-name`` flag.  Precedence is
defaults < ``--config`` JSON file < flags.  Exit status 0 means every check
in the report passed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

from . import diagnostics as dg
from .io import load_config
from .types import StreamError

COMMANDS = {
    "equiv": (dg.EquivConfig, dg.cmd_equiv),
    "replay": (dg.ReplayConfig, dg.cmd_replay),
    "theory": (dg.TheoryConfig, dg.cmd_theory),
    "bench": (dg.BenchConfig, dg.cmd_bench),
}

CSV_ROWS = {"equiv": "rows", "replay": "rows", "theory": "audits", "bench": "numeric"}


def _str2bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _add_config_flags(parser, cls):
    for f in dataclasses.fields(cls):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if f.name == "seed":
            continue
        if isinstance(default, bool):
            parser.add_argument(flag, type=_str2bool, default=None, metavar="BOOL")
        elif isinstance(default, tuple):
            elem = type(default[0]) if default else str
            parser.add_argument(flag, type=elem, nargs="+", default=None)
        else:
            parser.add_argument(flag, type=type(default), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osdn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (cls, fn) in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, default=None, help="directory for report files")
        p.add_argument("--format", choices=("csv", "json"), default="json")
        _add_config_flags(p, cls)
    return parser


def _rows_csv(rows) -> str:
    buf = io.StringIO()
    if rows:
        keys = list(rows[0].keys())
        for r in rows[1:]:
            keys += [k for k in r if k not in keys]
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})
    return buf.getvalue()


def render(command: str, report: dict, fmt: str) -> str:
    if fmt == "json":
        payload = {k: v for k, v in report.items() if k != "timing"}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"
    return _rows_csv(report[CSV_ROWS[command]])


def _summary(command: str, report: dict) -> str:
    if command == "equiv":
        w = report["worst"]
        s = (f"equiv: {report['n_cases']} cases, {report['n_failed']} failed; worst {w['variant']} "
             f"B={w['B']} T={w['T']} H={w['H']} K={w['K']} V={w['V']} C={w['C']} "
             f"err_out={w['err_out']:.3e} err_state={w['err_state']:.3e}")
        if w.get("rel32_out") is not None:
            s += f" rel32_out={w['rel32_out']:.3e}"
        return s
    if command == "replay":
        tag = "second-half" if report["config"]["repeat"] > 1 else "overall"
        a = report["os"]["second_half"] if tag == "second-half" else report["os"]["overall"]
        b = report["host"]["second_half"] if tag == "second-half" else report["host"]["overall"]
        return (f"replay: {tag} q_geo os={a:.4f} host={b:.4f} reduction={100 * report['reduction']:.1f}% "
                f"({'os below host' if report['os_below_host'] else 'no reduction'})")
    if command == "theory":
        lines = [f"theory: {report['n_pass']} PASS, {report['n_fail']} FAIL, {report['n_na']} N/A"]
        lines += [f"  FAIL {a['theorem']} seed={a['seed']} lhs={a['lhs']} rhs={a['rhs']}"
                  for a in report["audits"] if a["verdict"] == "FAIL"]
        return "\n".join(lines)
    lines = ["bench: variant phase1_share% chunk_tok/s recurrent_tok/s"]
    lines += [f"  {t['variant']:10s} {t['phase1_share_pct']:6.1f} {t['chunk_tok_s']:12.0f} {t['recurrent_tok_s']:12.0f}"
              for t in report["timing"]]
    return "\n".join(lines)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cls, fn = COMMANDS[args.command]
    overrides = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(cls)}
    try:
        cfg = load_config(cls, args.config, overrides)
        report = fn(cfg)
    except (StreamError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"osdn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    text = render(args.command, report, args.format)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"{args.command}.{args.format}").write_text(text)
        if args.command == "bench":
            (args.out / "bench_timing.csv").write_text(_rows_csv(report["timing"]))
    else:
        sys.stdout.write(text)
    print(_summary(args.command, report), file=sys.stderr)
    return 0 if report["ok"] else 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
