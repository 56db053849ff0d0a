"""Scaling studies and report emission."""
from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import asdict, replace
from pathlib import Path

from .driver import CaseConfig, SolveReport, run_case

__all__ = ["default_schedule", "scaling_study", "emit_report", "REPORT_FIELDS", "STUDY_FIELDS"]

REPORT_FIELDS = SolveReport.field_names()
STUDY_FIELDS = REPORT_FIELDS + ["speedup", "efficiency"]


def default_schedule(kind: str, base: CaseConfig) -> list:
    """Schedules used when none is given on the command line."""
    if kind == "weak":
        # four patches per worker, refinement fixed
        grids = {2: [(2, 2), (4, 2), (4, 4)], 3: [(2, 2, 1), (2, 2, 2), (4, 2, 2)]}[base.dim]
        return [{"patches": g, "workers": q, "holders": 1} for g, q in zip(grids, (1, 2, 4))]
    if kind == "strong":
        return [{"workers": q, "holders": 1} for q in (1, 2, 4)]
    if kind == "holders":
        Q = base.workers
        hs = sorted({h for h in (1, 2, 4, 8, 16, Q) if h <= Q})
        return [{"holders": h} for h in hs]
    raise ValueError(f"unknown study {kind!r}")


def scaling_study(kind: str, base: CaseConfig, schedule=None, runner=run_case) -> list:
    """
    Run ``base`` with each override of ``schedule`` and return table rows.

    Rows hold the :class:`SolveReport` fields plus ``speedup`` and
    ``efficiency`` (strong scaling: ``Q_0 t_0 / t``; weak scaling: ``t_0 / t``;
    holder study: ``t_0 / t``), all relative to the first row's total time.
    """
    if kind not in ("weak", "strong", "holders"):
        raise ValueError(f"unknown study {kind!r}")
    schedule = default_schedule(kind, base) if schedule is None else list(schedule)
    if not schedule:
        raise ValueError("empty schedule")
    cores = os.cpu_count() or 1
    rows = []
    for step in schedule:
        cfg = replace(base, **step)
        if cfg.workers > cores:
            warnings.warn(f"{cfg.workers} workers exceed the {cores} available cores; timings are not meaningful",
                          RuntimeWarning, stacklevel=2)
        rows.append(asdict(runner(cfg)))
    t0, q0 = rows[0]["total_time"], rows[0]["workers"]
    for r in rows:
        t = max(r["total_time"], 1e-300)
        if kind == "strong":
            r["speedup"] = q0 * t0 / t
            r["efficiency"] = r["speedup"] / r["workers"]
        else:
            r["speedup"] = t0 / t
            r["efficiency"] = t0 / t
    return rows


def emit_report(reports, fmt: str = "json", path=None) -> str:
    """
    Write reports as JSON (a list of objects) or CSV (header plus one row per case).

    ``reports`` may hold :class:`SolveReport` objects or plain dicts.
    Returns the written text; writes it to ``path`` if given.
    """
    rows = [r.to_dict() if isinstance(r, SolveReport) else dict(r) for r in reports]
    if not rows:
        raise ValueError("no reports to emit")
    if fmt == "json":
        text = json.dumps(rows, indent=1)
    elif fmt == "csv":
        names = list(rows[0])
        for r in rows[1:]:
            names += [k for k in r if k not in names]
        from io import StringIO

        buf = StringIO()
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text
