import functools

import pytest

from cartyield.ingest import calibrate_load_cell
from cartyield.pipeline import PipelineConfig, process_day
from cartyield.sim import SimConfig, field_model, simulate_day

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def sim_tracks(cfg: SimConfig, day: int = 0):
    """Simulate one day and build calibrated tracks the way the pipeline would."""
    logs, truth = simulate_day(cfg, day)
    f = field_model(cfg)
    tf = f.transform()
    tracks = {c: log.track(calibrate_load_cell(truth.calibration_samples[c]), tf) for c, log in logs.items()}
    return f, tracks, truth


@functools.lru_cache(maxsize=8)
def processed_day(cfg: SimConfig, day: int = 0, pcfg: PipelineConfig = PipelineConfig()):
    f, tracks, truth = sim_tracks(cfg, day)
    return f, tracks, truth, process_day(tracks, f, pcfg)


@pytest.fixture(scope="session")
def default_day():
    return processed_day(SimConfig(seed=11))
