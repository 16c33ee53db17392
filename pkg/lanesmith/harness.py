"""
Closed-loop experiments.

:func:`run_scenario` couples the planner with the traffic world until the
lane change completes, a collision happens or the time budget runs out.
:func:`run_grid` sweeps initial speeds and gaps, and :func:`run_path_study`
compares fixed desired-path offsets on one scenario.
"""
import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, config_to_dict, with_overrides
from .errors import LanesmithError, TraceIOError, ValidationError
from .planner import CompletionParams, PlannerConfig, PlannerState, detect_completion, plan_step
from .solver import CILQRSolver
from .trace import export
from .traffic import StepRecord, build_scenario, world_step

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
GRID_FILE = "grid.csv"
PATH_STUDY_FILE = "path_study.csv"

GRID_COLUMNS = (
    "v0", "d0", "success", "completion_time_s", "collision", "min_separation_m",
    "solve_p50_ms", "solve_p95_ms", "solve_max_ms", "steps", "error",
)

DEFAULT_V0_SET = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)
DEFAULT_D0_SET = (4.0, 6.0, 8.0, 10.0)
DEFAULT_PATH_OFFSETS = (0.0, 0.3, 0.5)


@dataclass(frozen=True)
class TimingStats:
    """Solve-time percentiles in milliseconds."""
    p50: float = 0.0
    p95: float = 0.0
    max: float = 0.0

    @classmethod
    def from_samples(cls, samples: Sequence[float]) -> "TimingStats":
        if len(samples) == 0:
            return cls()
        p50, p95 = np.percentile(np.asarray(samples, dtype=float), [50.0, 95.0])
        return cls(float(p50), float(p95), float(max(samples)))


@dataclass(frozen=True)
class RunSummary:
    """
    Outcome of one closed-loop run.

    Attributes
    ----------
    success : bool
        The lane change completed without any collision.
    completion_time_s : float or None
        Start of the first window that satisfies the completion predicate.
    collision : bool
        Two footprints touched at some step.
    min_separation_m : float
        Smallest ego footprint distance to any surrounding vehicle.
    solve_time_ms : TimingStats
        Distribution of the per-cycle planning time.
    steps : int
        Number of simulated steps.
    """
    success: bool
    completion_time_s: Optional[float]
    collision: bool
    min_separation_m: float
    solve_time_ms: TimingStats
    steps: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RunResult:
    summary: RunSummary
    trace: Tuple[StepRecord, ...]
    files: Tuple[Path, ...] = ()


@dataclass(frozen=True)
class GridRow:
    v0: float
    d0: float
    summary: Optional[RunSummary]
    error: Optional[str] = None

    @property
    def success(self) -> bool:
        return self.summary is not None and self.summary.success


@dataclass(frozen=True)
class GridResult:
    """Grid rows ordered by ``(v0, d0)`` and the share of successful cells."""
    rows: Tuple[GridRow, ...]
    success_rate: float


@dataclass(frozen=True, eq=False)
class PathSeries:
    """Lateral position and yaw over time for one fixed desired-path offset."""
    offset: float
    summary: RunSummary
    time: np.ndarray
    lateral: np.ndarray
    yaw: np.ndarray
    max_overshoot: float
    max_abs_yaw: float


@dataclass(frozen=True, eq=False)
class PathStudyResult:
    series: Tuple[PathSeries, ...]


def _completion_time(records: Sequence[StepRecord], target_y: float, params: CompletionParams) -> Optional[float]:
    history = []
    for i, record in enumerate(records):
        if record.ego_state is None:
            return None
        if detect_completion(record.ego_state, target_y, history, params):
            return records[i - params.hold_steps + 1].time
        history.append(record.ego_state)
    return None


def summarize(records: Sequence[StepRecord], target_y: float, completion: Optional[CompletionParams] = None) -> RunSummary:
    """
    Recompute a :class:`RunSummary` from trace rows.

    Works on records returned by :func:`run_scenario` and on records read
    back with :func:`lanesmith.trace.read_trace`.
    """
    completion = completion or CompletionParams()
    if not records:
        raise ValidationError("cannot summarize an empty trace")
    collision = any(r.collision is not None or r.min_separation <= 0.0 for r in records)
    completion_time = _completion_time(records, target_y, completion)
    return RunSummary(
        success=completion_time is not None and not collision,
        completion_time_s=completion_time,
        collision=collision,
        min_separation_m=float(min(r.min_separation for r in records)),
        solve_time_ms=TimingStats.from_samples([r.solve_ms for r in records if r.solve_ms > 0.0]),
        steps=len(records),
    )


def resolve_planner(config: RunConfig) -> PlannerConfig:
    """Planner config with the reference speed defaulted to ``v0``."""
    planner = config.planner
    if planner.cost.v_ref is None:
        planner = replace(planner, cost=planner.cost.with_reference_speed(config.scenario.v0))
    return planner


def run_scenario(config: RunConfig) -> RunResult:
    """
    Run one closed-loop lane change.

    A new plan is computed whenever the previously planned ``lambda``
    controls are used up. The loop ends on completion, on collision or
    after ``sim_duration_s``.

    Parameters
    ----------
    config : RunConfig
        Scenario, planner and output settings.

    Returns
    -------
    RunResult
        Summary, trace and the files written (if ``output_dir`` is set).

    Raises
    ------
    InvalidScenarioError
        If the scenario cannot be placed.
    TraceIOError
        If output files cannot be written.
    """
    scenario = config.scenario
    planner_config = resolve_planner(config)
    dt = planner_config.solver.dt
    world = build_scenario(
        scenario.v0, scenario.d0, scenario.layout, planner_config.ego, scenario.traffic, dt
    )
    lanes = scenario.layout.lanes
    state = PlannerState.initial(planner_config)
    solver = CILQRSolver(planner_config.solver)
    max_steps = int(round(config.sim_duration_s / dt))

    records: List[StepRecord] = []
    history = []
    queue = []
    plan = None
    for _ in range(max_steps):
        fresh = not queue
        if fresh:
            plan = plan_step(world.ego, world.vehicles, state, planner_config, lanes, solver)
            queue = list(plan.controls)
        world_next, record = world_step(world, queue.pop(0))
        record = replace(
            record,
            mode=plan.mode.value,
            path_rung=plan.rung,
            solve_ms=plan.solve_time_ms if fresh else 0.0,
            solver_iters=plan.solver_iterations if fresh else 0,
        )
        records.append(record)
        if record.collision is not None:
            logger.warning("collision between %d and %d at t=%.1f", *record.collision, record.time)
            break
        if detect_completion(record.ego_state, lanes.target_y, history, config.completion):
            break
        history.append(record.ego_state)
        world = world_next

    summary = summarize(records, lanes.target_y, config.completion)
    logger.info(
        "run v0=%g d0=%g: success=%s completion=%s steps=%d",
        scenario.v0, scenario.d0, summary.success, summary.completion_time_s, summary.steps,
    )
    files: Tuple[Path, ...] = ()
    if config.output_dir is not None:
        files = tuple(_write_run(config, records, summary))
    return RunResult(summary, tuple(records), files)


def _write_run(config: RunConfig, records: Sequence[StepRecord], summary: RunSummary) -> List[Path]:
    out = Path(config.output_dir)
    written = export(records, out, config.trace_format, summary.to_dict())
    config_path = out / CONFIG_FILE
    try:
        config_path.write_text(json.dumps(config_to_dict(config), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        logger.error("Cannot write %s: %s", config_path, exc)
        raise TraceIOError(config_path, exc.strerror or str(exc)) from exc
    written.append(config_path)
    return written


def cell_name(v0: float, d0: float) -> str:
    return f"v0_{v0:g}_d0_{d0:g}"


def _run_cell(config: RunConfig) -> Tuple[Optional[RunSummary], Optional[str]]:
    try:
        return run_scenario(config).summary, None
    except LanesmithError as exc:
        logger.warning("cell v0=%g d0=%g failed: %s", config.scenario.v0, config.scenario.d0, exc)
        return None, f"{type(exc).__name__}: {exc}"


def run_grid(
    v0_set: Sequence[float],
    d0_set: Sequence[float],
    base: RunConfig,
    workers: int = 1,
) -> GridResult:
    """
    Run every ``(v0, d0)`` combination of the two sets.

    Every cell builds a fresh world and planner state. Errors of a single
    cell are recorded in its row and the grid continues.

    Parameters
    ----------
    v0_set, d0_set : sequence of float
        Non-empty sets of initial speeds (m/s) and gaps (m).
    base : RunConfig
        Template config; its scenario speed and gap are overridden. When
        ``base.output_dir`` is set each cell writes to its own
        ``v0_<v>_d0_<d>`` directory and ``grid.csv`` is written at the top.
    workers : int, optional
        Number of worker processes; 1 runs the cells in this process.

    Returns
    -------
    GridResult
        Rows ordered by ``(v0, d0)`` and the success rate over all cells.
    """
    if not v0_set or not d0_set:
        raise ValidationError("run_grid needs non-empty v0 and d0 sets")
    if workers < 1:
        raise ValidationError(f"workers must be at least 1, got {workers}")
    cells = sorted(set(product((float(v) for v in v0_set), (float(d) for d in d0_set))))
    configs = []
    for v0, d0 in cells:
        out = None if base.output_dir is None else str(Path(base.output_dir) / cell_name(v0, d0))
        configs.append(with_overrides(base, v0=v0, d0=d0, output_dir=out))

    if workers == 1:
        outcomes = [_run_cell(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell, configs))

    rows = tuple(GridRow(v0, d0, summary, error) for (v0, d0), (summary, error) in zip(cells, outcomes))
    rate = sum(row.success for row in rows) / len(rows)
    logger.info("grid finished: %d cells, success rate %.3f", len(rows), rate)
    result = GridResult(rows, rate)
    if base.output_dir is not None:
        write_grid_table(result, Path(base.output_dir) / GRID_FILE)
    return result


def write_grid_table(result: GridResult, path: Path) -> Path:
    """Write one CSV row per cell followed by a ``success_rate`` line."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(GRID_COLUMNS)
            for row in result.rows:
                s = row.summary
                if s is None:
                    writer.writerow([row.v0, row.d0, False, "", "", "", "", "", "", "", row.error])
                    continue
                writer.writerow([
                    row.v0, row.d0, s.success,
                    "" if s.completion_time_s is None else repr(s.completion_time_s),
                    s.collision, repr(s.min_separation_m),
                    repr(s.solve_time_ms.p50), repr(s.solve_time_ms.p95), repr(s.solve_time_ms.max),
                    s.steps, "",
                ])
            writer.writerow(["success_rate", repr(result.success_rate)])
    except OSError as exc:
        logger.error("Cannot write grid table %s: %s", path, exc)
        raise TraceIOError(path, exc.strerror or str(exc)) from exc
    return path


def lateral_overshoot(lateral: Sequence[float], target_y: float, toward_original: float) -> float:
    """Largest excursion past the target centerline away from the original lane."""
    excursion = (target_y - np.asarray(lateral, dtype=float)) * toward_original
    return float(max(0.0, np.max(excursion))) if excursion.size else 0.0


def run_path_study(offsets: Sequence[float], config: RunConfig) -> PathStudyResult:
    """
    Run the same scenario once per fixed desired-path offset.

    The fallback ladder is disabled so that the offset is the only
    difference between the runs.

    Parameters
    ----------
    offsets : sequence of float
        At least two lateral offsets of the target-lane path (m).
    config : RunConfig
        Scenario and planner settings shared by all runs.

    Returns
    -------
    PathStudyResult
        One lateral/yaw series per offset, in input order.
    """
    if len(offsets) < 2:
        raise ValidationError(f"run_path_study needs at least two offsets, got {len(offsets)}")
    lanes = config.scenario.layout.lanes
    series = []
    for offset in offsets:
        out = None if config.output_dir is None else str(Path(config.output_dir) / f"offset_{offset:g}")
        run_config = replace(
            config,
            planner=replace(config.planner, use_fallback_ladder=False, path_offset=float(offset)),
            output_dir=out,
        )
        result = run_scenario(run_config)
        time = np.array([r.time for r in result.trace])
        lateral = np.array([r.ego_state.py for r in result.trace])
        yaw = np.array([r.ego_state.theta for r in result.trace])
        series.append(PathSeries(
            offset=float(offset),
            summary=result.summary,
            time=time,
            lateral=lateral,
            yaw=yaw,
            max_overshoot=lateral_overshoot(lateral, lanes.target_y, lanes.toward_original),
            max_abs_yaw=float(np.max(np.abs(yaw))),
        ))
        logger.info("path offset %g: overshoot %.3f m, max |yaw| %.3f rad", offset, series[-1].max_overshoot,
                    series[-1].max_abs_yaw)
    study = PathStudyResult(tuple(series))
    if config.output_dir is not None:
        write_path_series(study, Path(config.output_dir) / PATH_STUDY_FILE)
    return study


def write_path_series(study: PathStudyResult, path: Path) -> Path:
    """Write the plot-ready ``offset, t, py, theta`` rows of a path study."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["offset", "t", "py", "theta"])
            for s in study.series:
                for t, py, theta in zip(s.time, s.lateral, s.yaw):
                    writer.writerow([repr(s.offset), repr(float(t)), repr(float(py)), repr(float(theta))])
    except OSError as exc:
        logger.error("Cannot write path study %s: %s", path, exc)
        raise TraceIOError(path, exc.strerror or str(exc)) from exc
    return path
