"""Yield maps from load-cell and GNSS logs of instrumented strawberry picking carts."""
from ._kernels import BACKEND
from .errors import CartYieldError
from .evaluation import GroundTruth, MetricReport, evaluate
from .field import FieldModel, GridSpec, load_field, make_grid, save_field
from .ingest import CartTrack, build_track, calibrate_load_cell, load_calibration, parse_raw_log
from .pipeline import DayResult, PipelineConfig, process_day, run_pipeline
from .sim import SimConfig, field_model, simulate_day, write_day
from .yields import YieldGrid, YieldPoints, accumulate_season, grid_yield

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CartTrack", "CartYieldError", "DayResult", "FieldModel", "GridSpec", "GroundTruth", "MetricReport",
    "PipelineConfig", "SimConfig", "YieldGrid", "YieldPoints", "accumulate_season", "build_track",
    "calibrate_load_cell", "evaluate", "field_model", "grid_yield", "load_calibration", "load_field", "make_grid",
    "parse_raw_log", "process_day", "run_pipeline", "save_field", "simulate_day", "write_day",
]
