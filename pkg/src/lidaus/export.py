"""Plain-text outputs: metric tables, plot data, and atomic output directories."""

from __future__ import annotations

import csv
import io
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lidaus.mission import MissionConfig, MissionReport
from lidaus.runlog import RunLog
from lidaus.scenario import config_hash, dump_scenario

OUTPUT_ROOT_ENV = "LIDAUS_OUTPUT_ROOT"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _quantiles(values: Sequence[float]) -> list:
    if not values:
        return [0, None, None, None, None, None, None]
    a = np.asarray(values, dtype=float)
    q = np.quantile(a, [0.0, 0.25, 0.5, 0.75, 1.0])
    return [len(a), *map(float, q), float(a.mean())]


def plot_tables(report: MissionReport) -> dict[str, str]:
    """CSV text per plot: errors, boxplot, trajectory, steiner."""
    rows = report.metrics.rows
    errors = to_csv(
        ["beacon", "error", "x", "y", "z"],
        [(r.beacon_id, r.error, r.ex, r.ey, r.ez) for r in rows],
    )
    found = [r for r in rows if r.found]
    box = to_csv(
        ["metric", "n", "min", "q1", "median", "q3", "max", "mean"],
        [
            [name, *_quantiles([getattr(r, attr) for r in found])]
            for name, attr in (("error", "error"), ("x", "ex"), ("y", "ey"), ("z", "ez"))
        ],
    )
    traj = report.trajectory() or [(0.0, 0.0, 0.0)]
    steps = [r.step_index for r in report.log] or [0]
    trajectory = to_csv(["step", "x", "y", "z"], [(k, *map(float, p)) for k, p in zip(steps, traj)])
    steiner_rows = []
    for s in report.stages:
        steiner_rows += [(s.index, "tree", *n) for n in s.tree_nodes]
        steiner_rows += [(s.index, "branch", *n) for n in s.branch]
    steiner = to_csv(["stage", "role", "i", "j", "layer"], steiner_rows)
    return {"errors.csv": errors, "boxplot.csv": box, "trajectory.csv": trajectory, "steiner.csv": steiner}


def export_plot_data(report: MissionReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in plot_tables(report).items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths


def metrics_csv(report: MissionReport) -> str:
    return to_csv(
        ["beacon", "found", "error", "ex", "ey", "ez"],
        [(r.beacon_id, r.beacon_id in report.found, r.error, r.ex, r.ey, r.ez) for r in report.metrics.rows],
    )


def report_json(report: MissionReport, cfg: MissionConfig) -> str:
    d = {"config_hash": config_hash(cfg), **report.to_dict()}
    return json.dumps(d, sort_keys=True, indent=1, allow_nan=False) + "\n"


def resolve_output(path: str | Path) -> Path:
    """Relative output paths are placed under ``$LIDAUS_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


@contextmanager
def atomic_directory(target: str | Path, overwrite: bool = False):
    """Yield a scratch directory that is renamed to ``target`` only on success."""
    target = Path(target)
    if target.exists() and any(target.iterdir()) and not overwrite:
        raise FileExistsError(f"output directory {target} exists and is not empty")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        old = target.with_name(f".{target.name}.old")
        shutil.rmtree(old, ignore_errors=True)
        os.replace(target, old)
        os.replace(tmp, target)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, target)


def write_run(report: MissionReport, cfg: MissionConfig, directory: Path) -> None:
    """All files of one run: resolved config, report, metrics, run log, plot data."""
    (directory / "config.yaml").write_text(dump_scenario(cfg), encoding="utf-8")
    (directory / "report.json").write_text(report_json(report, cfg), encoding="utf-8")
    (directory / "metrics.csv").write_text(metrics_csv(report), encoding="utf-8")
    RunLog.from_report(report, cfg).write(directory / "runlog.jsonl")
    export_plot_data(report, directory / "plot")
