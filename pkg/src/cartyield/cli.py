"""Command-line entry point: ``cartyield simulate | ingest | run | evaluate | season``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import typing

from . import kvfile
from .errors import CartYieldError, ConfigError
from .evaluation import GroundTruth, evaluate
from .field import load_field
from .pipeline import (PipelineConfig, load_tracks, load_truth, read_grid, read_yield_points, run_pipeline,
                       write_grid, zero_fraction)
from .sim import SimConfig, day_name, simulate_day, write_day
from .yields import accumulate_season

log = logging.getLogger("cartyield")

# set by dedicated options or meaningless on the command line
_PIPELINE_SKIP = {"field", "logs", "calibration", "truth", "out", "day", "seed", "resolution"}
_SIM_SKIP = {"seed"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_overrides(p: argparse.ArgumentParser, cls, skip: set[str], title: str) -> None:
    grp = p.add_argument_group(title)
    for f in dataclasses.fields(cls):
        if f.name not in skip:
            grp.add_argument(_flag(f.name), dest="ov_" + f.name, metavar="V", default=None,
                             help=f"default {kvfile._fmt(f.default)}")


def _overrides(args: argparse.Namespace, cls) -> dict:
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        raw = getattr(args, "ov_" + f.name, None)
        if raw is None:
            continue
        try:
            out[f.name] = kvfile.coerce(hints[f.name], raw)
        except ValueError as e:
            raise ConfigError(f"{_flag(f.name)}: {e}") from None
    return out


def _load_config(cls, path: str | None, overrides: dict):
    if path is None:
        return cls(**overrides)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        return cls.load(path, **overrides)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    ov = _overrides(args, SimConfig)
    if args.seed is not None:
        ov["seed"] = args.seed
    cfg = _load_config(SimConfig, args.config, ov)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "sim_config.txt"))
    for d in range(args.days):
        logs, truth = simulate_day(cfg, d)
        write_day(args.out, cfg, logs, truth, write_field=d == 0)
        log.info("%s: %d carts, %d trays", truth.day, len(logs), sum(truth.counts.values()))
    return 0


def _pipeline_config(args, **paths) -> PipelineConfig:
    ov = _overrides(args, PipelineConfig)
    for k in ("seed", "resolution"):
        if getattr(args, k, None) is not None:
            ov[k] = getattr(args, k)
    ov.update({k: v for k, v in paths.items() if v is not None})
    return _load_config(PipelineConfig, args.config, ov)


def _day_paths(args, day: str) -> dict:
    """Input locations, either explicit or inside a simulator-style data directory."""
    paths = {"field": args.field, "logs": args.logs, "calibration": args.calibration, "truth": args.truth}
    if args.data:
        base = os.path.join(args.data, day)
        defaults = {"field": os.path.join(args.data, "field.txt"), "logs": os.path.join(base, "logs"),
                    "calibration": os.path.join(base, "calibration")}
        if os.path.isdir(os.path.join(base, "truth")):
            defaults["truth"] = os.path.join(base, "truth")
        paths = {k: v if v is not None else defaults.get(k) for k, v in paths.items()}
    return paths


def cmd_ingest(args) -> int:
    cfg = _pipeline_config(args, **{k: v for k, v in _day_paths(args, args.day or "day01").items() if k != "truth"})
    f = load_field(cfg.field)
    tracks, skipped = load_tracks(cfg, f)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "tracks.csv"), "w", encoding="utf-8") as fh:
        fh.write("cart_id,src,t,x,y,mass,a_x,a_y,a_z\n")
        for c in sorted(tracks):
            tr = tracks[c]
            for row in zip(tr.src.tolist(), tr.t.tolist(), tr.x.tolist(), tr.y.tolist(), tr.mass.tolist(),
                           tr.ax.tolist(), tr.ay.tolist(), tr.az.tolist()):
                fh.write(c + "," + ",".join(repr(v) for v in row) + "\n")
    with open(os.path.join(args.out, "ingest_skipped.csv"), "w", encoding="utf-8") as fh:
        fh.write("cart_id,line\n")
        fh.writelines(f"{c},{n}\n" for c in sorted(skipped) for n in skipped[c])
    log.info("ingested %d carts, %d malformed lines", len(tracks), sum(map(len, skipped.values())))
    return 0


def cmd_run(args) -> int:
    days = args.day or ([day_name(d) for d in range(args.days)] if args.data else ["day01"])
    for day in days:
        out = os.path.join(args.out, day) if len(days) > 1 else args.out
        cfg = _pipeline_config(args, out=out, day=day, **_day_paths(args, day))
        _, report = run_pipeline(cfg)
        log.info("%s: wrote %s", day, out)
        if report is not None:
            print(f"[{day}]")
            print(report.to_text())
    return 0


def cmd_evaluate(args) -> int:
    if len(args.run) != len(args.truth):
        raise ConfigError("give one --truth directory per --run directory")
    points, segments, counts, grids = {}, [], {}, []
    for run_dir, truth_dir in zip(args.run, args.truth):
        cfg = PipelineConfig.load(os.path.join(run_dir, "config.txt"))
        points[cfg.day] = read_yield_points(os.path.join(run_dir, "yield_points.csv"))
        grids.append(read_grid(os.path.join(run_dir, "grid.txt")))
        gt = load_truth(truth_dir)
        segments.extend(gt.segments)
        counts.update(gt.counts)
    zero = zero_fraction(accumulate_season(grids))
    report = evaluate(points, GroundTruth(segments, counts), zero, args.avg_tray_mass)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_kv())
    print(report.to_text())
    return 0


def cmd_season(args) -> int:
    grids = [read_grid(os.path.join(d, "grid.txt") if os.path.isdir(d) else d) for d in args.runs]
    season = accumulate_season(grids)
    write_grid(args.out, season)
    log.info("season over %d days: %.1f kg", len(grids), season.total())
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cartyield", description="Yield maps from instrumented picking carts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write simulated raw logs, calibrations and ground truth")
    s.add_argument("--config", help="simulator config file (key = value)")
    s.add_argument("--seed", type=int)
    s.add_argument("--days", type=int, default=1)
    s.add_argument("--out", required=True)
    _add_overrides(s, SimConfig, _SIM_SKIP, "simulator parameters")
    s.set_defaults(func=cmd_simulate)

    def inputs(q, multi_day: bool):
        q.add_argument("--config", help="pipeline config file (key = value)")
        q.add_argument("--data", help="simulator output directory; fills in the paths below")
        q.add_argument("--field")
        q.add_argument("--logs")
        q.add_argument("--calibration")
        if multi_day:
            q.add_argument("--day", action="append", help="day name; repeat for several days")
            q.add_argument("--days", type=int, default=1, help="with --data: process day01..dayNN")
        else:
            q.add_argument("--day")
        q.add_argument("--seed", type=int)
        q.add_argument("--out", required=True)

    s = sub.add_parser("ingest", help="parse and calibrate raw logs into local-frame tracks")
    inputs(s, multi_day=False)
    s.set_defaults(func=cmd_ingest, truth=None, resolution=None)

    s = sub.add_parser("run", help="run all processing steps and write every stage")
    inputs(s, multi_day=True)
    s.add_argument("--truth", help="ground-truth directory; adds metrics.txt")
    s.add_argument("--resolution", type=float, help="grid cell size in m")
    _add_overrides(s, PipelineConfig, _PIPELINE_SKIP, "thresholds")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("evaluate", help="score run outputs against ground truth")
    s.add_argument("--run", action="append", required=True, help="run output directory; repeatable")
    s.add_argument("--truth", action="append", required=True, help="matching truth directory; repeatable")
    s.add_argument("--avg-tray-mass", type=float, default=PipelineConfig.avg_tray_mass)
    s.add_argument("--out", help="write the report here as key = value")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("season", help="sum daily grids into a season map")
    s.add_argument("runs", nargs="+", help="run output directories or grid files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_season)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CartYieldError as e:
        print(f"cartyield: {e.stage or 'config'} error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"cartyield: io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
