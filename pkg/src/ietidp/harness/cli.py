"""Command line interface: ``python -m ietidp <solve|scale-weak|scale-strong|scale-holders>``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .driver import CaseConfig, run_case
from .studies import emit_report, scaling_study

__all__ = ["main", "build_parser", "config_from_args"]

_FLAGS = {
    "dim": dict(type=int, choices=(2, 3)),
    "patches": dict(type=int, nargs="+", help="patch grid, e.g. 4 4 (one value = same in every direction)"),
    "degree": dict(type=int),
    "refine": dict(type=int, help="2**refine elements per patch direction"),
    "form": dict(choices=("cg", "dg")),
    "delta": dict(type=float, help="dG penalty (default 4 (p+1)^2)"),
    "primal": dict(help="primal strategy: default, vertices, edges, vertices+edges, ..."),
    "workers": dict(type=int),
    "holders": dict(type=int),
    "tol": dict(type=float),
    "maxit": dict(type=int),
    "problem": dict(choices=("benchmark", "homogeneous")),
    "boundary": dict(choices=("dirichlet", "mixed")),
    "backend": dict(choices=("thread", "process")),
    "deterministic": dict(choices=("on", "off")),
    "seed": dict(type=int),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ietidp", description="IETI-DP solver benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("solve", "scale-weak", "scale-strong", "scale-holders"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON file with CaseConfig fields")
        for flag, kw in _FLAGS.items():
            p.add_argument(f"--{flag}", default=None, **kw)
        p.add_argument("--out", type=Path, default=None, help="output file (stdout if omitted)")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        if name != "solve":
            p.add_argument("--schedule", default=None,
                           help="JSON list of overrides, e.g. '[{\"workers\": 1}, {\"workers\": 2}]'")
    return parser


def config_from_args(args) -> CaseConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None) is not None:
        values.update(json.loads(Path(args.config).read_text()))
    known = {f.name for f in fields(CaseConfig)}
    unknown = set(values) - known
    if unknown:
        raise SystemExit(f"unknown config fields: {sorted(unknown)}")
    for flag in _FLAGS:
        v = getattr(args, flag, None)
        if v is None:
            continue
        if flag == "deterministic":
            v = v == "on"
        values[flag] = v
    if "deterministic" in values and isinstance(values["deterministic"], str):
        values["deterministic"] = values["deterministic"] == "on"
    dim = values.get("dim", CaseConfig.dim)
    if "patches" in values:
        pts = values["patches"]
        pts = [pts] if isinstance(pts, int) else list(pts)
        values["patches"] = tuple(pts * dim if len(pts) == 1 else pts)
    elif dim != CaseConfig.dim:
        values["patches"] = (2,) * dim
    return CaseConfig(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = config_from_args(args)
    if args.command == "solve":
        rows = [run_case(cfg)]
    else:
        kind = args.command.split("-", 1)[1]
        schedule = json.loads(args.schedule) if args.schedule else None
        if schedule is not None:
            for step in schedule:
                if "patches" in step:
                    step["patches"] = tuple(step["patches"])
        rows = scaling_study(kind, cfg, schedule)
    text = emit_report(rows, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
