"""Command-line entry point: ``lidaus run | compare | ablate | replay | scenarios``.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, Sequence

import numpy as np

from lidaus import __version__
from lidaus.export import atomic_directory, resolve_output, to_csv, write_run
from lidaus.mission import METHODS, MissionConfig, MissionReport, run_method, selection_init
from lidaus.runlog import RunLogError, load, replay_logged, verify_replays
from lidaus.scenario import ScenarioError, parse_scenario, shipped_scenarios

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("lidaus")


class _UsageError(Exception):
    pass


def _csv_list(text: str, conv: Callable = str) -> list:
    try:
        return [conv(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise _UsageError(f"bad list {text!r}: {e}") from None


def _spacing(t: str) -> float | None:
    return None if t.lower() == "none" else float(t)


def default_method(cfg: MissionConfig) -> str:
    return "route" if cfg.route is not None else "lidaus"


def run_many(jobs: Sequence[tuple], fn: Callable, n_workers: int) -> list:
    """Evaluate ``fn(*job)`` for every job; results keep the order of ``jobs``."""
    if n_workers <= 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


def _seeds(cfg: MissionConfig, n: int) -> list[int]:
    if n < 1:
        raise _UsageError("--seeds must be >= 1")
    return [cfg.seed + k for k in range(n)]


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def _emit(text: str, out: str | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    with atomic_directory(resolve_output(out), overwrite=True) as d:
        (d / name).write_text(text, encoding="utf-8")


# -- subcommands ----------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = parse_scenario(args.config)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    method = args.method or default_method(cfg)
    report = run_method(cfg, method)
    target = resolve_output(args.out)
    with atomic_directory(target, overwrite=args.force) as d:
        write_run(report, cfg, d)
    m = report.metrics
    print(
        f"{method} seed={cfg.seed} termination={report.termination} steps={report.total_steps} "
        f"anchors={report.total_anchors} found={len(report.found)}/{len(cfg.targets)} "
        f"mean_error={m.mean_error:.3f} unfound={m.n_unfound} -> {target}"
    )
    return EXIT_OK


def compare_table(cfg: MissionConfig, methods: Sequence[str], seeds: Sequence[int], jobs: int = 1):
    """Per-run rows and one summary row per method (mean over seeds)."""
    for m in methods:
        if m not in METHODS:
            raise _UsageError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
    grid = [(m, s) for m in methods for s in seeds]
    reports: list[MissionReport] = run_many(grid, lambda m, s: run_method(cfg.with_(seed=s), m), jobs)
    ids = cfg.target_ids
    runs = [
        (m, s, r.metrics.mean_error if r.metrics.estimated else None, r.metrics.n_unfound, r.total_steps, r.total_anchors, len(r.found), r.termination)
        for (m, s), r in zip(grid, reports)
    ]
    summary = []
    for m in methods:
        rs = [r for (mm, _), r in zip(grid, reports) if mm == m]
        per_beacon = [_mean(r.metrics.error_of(b) for r in rs) for b in ids]
        means = [r.metrics.mean_error for r in rs if r.metrics.estimated]
        summary.append((
            m, len(rs), _mean(means), float(np.std(means)) if means else None,
            _mean(r.metrics.n_unfound for r in rs), _mean(r.total_steps for r in rs),
            _mean(r.total_anchors for r in rs), *per_beacon,
        ))
    head = ["method", "seeds", "mean_error", "std_error", "mean_unfound", "mean_steps", "mean_anchors", *ids]
    run_head = ["method", "seed", "mean_error", "unfound", "steps", "anchors", "found", "termination"]
    return head, summary, run_head, runs


def cmd_compare(args) -> int:
    cfg = parse_scenario(args.config)
    methods = _csv_list(args.methods)
    head, summary, run_head, runs = compare_table(cfg, methods, _seeds(cfg, args.seeds), args.jobs)
    text = to_csv(head, summary)
    if args.out is None:
        sys.stdout.write(text)
    else:
        with atomic_directory(resolve_output(args.out), overwrite=args.force) as d:
            (d / "compare.csv").write_text(text, encoding="utf-8")
            (d / "runs.csv").write_text(to_csv(run_head, runs), encoding="utf-8")
        print(f"wrote {resolve_output(args.out)}")
    return EXIT_OK


def anchor_ablation(
    cfg: MissionConfig,
    noises: Sequence[float],
    spacings: Sequence[float | None],
    seeds: Sequence[int],
    beacon: str | None = None,
    jobs: int = 1,
):
    """Route missions over noise x spacing x seed; rows per (noise, spacing).

    The reported error is ``beacon``'s when given, else the all-target mean.
    ``improvement`` is ``none_error / error - 1`` against the no-anchor row of
    the same noise level, when that row is present.
    """
    if cfg.route is None:
        raise _UsageError("the anchor ablation needs a scenario with mission.route")
    grid = [(n, sp, s) for n in noises for sp in spacings for s in seeds]

    def one(n, sp, s):
        c = cfg.with_(seed=s, anchor_spacing=sp, noise=replace(cfg.noise, rssi_std=n))
        r = run_method(c, "route")
        return r.metrics.error_of(beacon) if beacon else r.metrics.mean_error

    errs = run_many(grid, one, jobs)
    table: dict[tuple, list] = {}
    for (n, sp, _), e in zip(grid, errs):
        table.setdefault((n, sp), []).append(e)
    rows = []
    for n in noises:
        base = _mean(table[(n, None)]) if (n, None) in table else None
        for sp in spacings:
            e = _mean(table[(n, sp)])
            imp = None if base is None or e is None or e == 0 else base / e - 1.0
            rows.append((n, "none" if sp is None else sp, len(seeds), e, imp))
    return ["noise", "spacing", "seeds", "error", "improvement"], rows


def replay_ablation(cfg: MissionConfig, seeds: Sequence[int], jobs: int = 1):
    """Live vs threshold-replay error per (seed, beacon)."""
    if cfg.route is None or cfg.replay_threshold is None:
        raise _UsageError("the replay ablation needs mission.route and mission.replay_threshold")

    def one(s):
        r = run_method(cfg.with_(seed=s), "route")
        replayed = r.replay_metrics
        return [(s, b, r.metrics.error_of(b), replayed.error_of(b)) for b in cfg.target_ids]

    rows = [row for part in run_many([(s,) for s in seeds], one, jobs) for row in part]
    return ["seed", "beacon", "live_error", "replay_error"], rows


def summarize_replay(rows) -> dict:
    improved, gains, total = 0, [], 0
    for _, _, live, rep in rows:
        if live is None or rep is None:
            continue
        total += 1
        if rep < live:
            improved += 1
            gains.append((live - rep) / live)
    return {
        "pairs": total,
        "improved_fraction": improved / total if total else 0.0,
        "mean_improvement": float(np.mean(gains)) if gains else 0.0,
    }


def cmd_ablate(args) -> int:
    cfg = parse_scenario(args.config)
    seeds = _seeds(cfg, args.seeds)
    if args.study == "anchors":
        head, rows = anchor_ablation(
            cfg, _csv_list(args.noise, float), _csv_list(args.spacing, _spacing), seeds, args.beacon, args.jobs
        )
        _emit(to_csv(head, rows), args.out, "ablation.csv")
    else:
        head, rows = replay_ablation(cfg, seeds, args.jobs)
        s = summarize_replay(rows)
        text = to_csv(head, rows)
        _emit(text, args.out, "replay_ablation.csv")
        print(json.dumps(s, sort_keys=True), file=sys.stderr if args.out is None else sys.stdout)
    return EXIT_OK


def parse_points(spec: str) -> int | tuple[int, ...]:
    """``stage:K`` gives the stage number K; otherwise step indices like ``1,2,5-9``."""
    try:
        if spec.startswith("stage:"):
            return int(spec[6:])
        pts: set[int] = set()
        for part in _csv_list(spec):
            a, sep, b = part.partition("-")
            pts.update(range(int(a), int(b) + 1) if sep else (int(a),))
    except ValueError:
        raise _UsageError(f"bad --points value {spec!r}") from None
    return tuple(sorted(pts))


def cmd_replay(args) -> int:
    rl = load(args.log)
    if args.verify:
        rows = verify_replays(rl)
        bad = [r for r in rows if not r[2]]
        print(f"{len(rows) - len(bad)}/{len(rows)} logged replays reproduced bit-exactly")
        return EXIT_OK if not bad else EXIT_RUNTIME
    if args.beacon is None or args.points is None:
        raise _UsageError("replay needs --beacon and --points (or --verify)")
    sel = parse_points(args.points)
    logged = None
    if isinstance(sel, int):
        stage = next((s for s in rl.stages if s.index == sel), None)
        if stage is None or args.beacon not in stage.replays:
            raise _UsageError(f"no logged replay of {args.beacon} in stage {sel}")
        pts, init, logged = stage.replays[args.beacon]
    else:
        pts = sel
        by_step = {r.step_index: r for r in rl.records}
        missing = [p for p in pts if p not in by_step]
        if missing:
            raise _UsageError(f"steps not in log: {missing[:5]}")
        pos = np.array([by_step[p].pose_estimate_at_record for p in pts], dtype=float)
        init = selection_init(pos)
    est = replay_logged(rl, args.beacon, pts, init)
    out = {"beacon": args.beacon, "points": len(pts), "estimate": est.to_dict()}
    if logged is not None:
        out["matches_log"] = bool(np.array_equal(est.mu, logged.mu) and np.array_equal(est.sigma, logged.sigma))
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_scenarios(args) -> int:
    for name in shipped_scenarios():
        print(name)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidaus", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute one mission and write an output directory")
    r.add_argument("--config", required=True, help="scenario file or shipped scenario name")
    r.add_argument("--seed", type=int)
    r.add_argument("--method", choices=[*METHODS, "route"])
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true", help="replace an existing output directory")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="method comparison table over seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--methods", default=",".join(METHODS))
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out")
    c.add_argument("--force", action="store_true")
    c.set_defaults(fn=cmd_compare)

    a = sub.add_parser("ablate", help="anchor-density or replay ablation")
    a.add_argument("study", choices=["anchors", "replay"])
    a.add_argument("--config", required=True)
    a.add_argument("--noise", default="3,5,8")
    a.add_argument("--spacing", default="1,4,none")
    a.add_argument("--seeds", type=int, default=10)
    a.add_argument("--beacon", help="report this target's error instead of the mean")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    rp = sub.add_parser("replay", help="re-run selective replay from a run log")
    rp.add_argument("--log", required=True)
    rp.add_argument("--beacon")
    rp.add_argument("--points", help="stage:K, or step indices like 3,4,10-20")
    rp.add_argument("--verify", action="store_true", help="re-run every logged replay")
    rp.set_defaults(fn=cmd_replay)

    s = sub.add_parser("scenarios", help="list shipped scenarios")
    s.set_defaults(fn=cmd_scenarios)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ScenarioError, RunLogError, _UsageError, FileNotFoundError, FileExistsError) as e:
        print(f"lidaus: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"lidaus: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
