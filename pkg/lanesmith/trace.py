"""
Export and read-back of closed-loop traces.

A trace is the list of :class:`~lanesmith.traffic.StepRecord` rows of one
run. Rows are written as CSV or JSON lines with a fixed column order; floats
are written with ``repr`` so reading a file back reproduces every value
exactly.
"""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import TraceIOError, ValidationError
from .traffic import StepRecord
from .vehicle_model import ControlInput, VehicleState

logger = logging.getLogger(__name__)

BASE_COLUMNS = (
    "t", "ego_px", "ego_py", "ego_v", "ego_theta", "ego_a", "ego_thetadot",
    "mode", "path_rung", "solve_ms", "solver_iters", "min_separation",
)
VEHICLE_FIELDS = ("px", "py", "v", "a")
TIMING_COLUMNS = ("solve_ms",)

TRACE_FILES = {"csv": "trace.csv", "jsonl": "trace.jsonl"}
SUMMARY_FILE = "summary.json"

_INT_COLUMNS = ("path_rung", "solver_iters")


def trace_columns(vehicle_ids: Sequence[int]) -> List[str]:
    """Column names for a trace with the given surrounding vehicles."""
    columns = list(BASE_COLUMNS)
    for k in vehicle_ids:
        columns.extend(f"v{k}_{name}" for name in VEHICLE_FIELDS)
    return columns


def record_to_row(record: StepRecord) -> Dict[str, Any]:
    """Flatten one record into a column-keyed dictionary."""
    if record.ego_state is None or record.ego_control is None:
        raise ValidationError(f"trace row at t={record.time} has no ego")
    ego = record.ego_state
    row = {
        "t": record.time,
        "ego_px": ego.px,
        "ego_py": ego.py,
        "ego_v": ego.v,
        "ego_theta": ego.theta,
        "ego_a": record.ego_control.a,
        "ego_thetadot": record.ego_control.theta_dot,
        "mode": record.mode,
        "path_rung": record.path_rung,
        "solve_ms": record.solve_ms,
        "solver_iters": record.solver_iters,
        "min_separation": record.min_separation,
    }
    for k, state, accel in zip(record.vehicle_ids, record.vehicle_states, record.vehicle_accels):
        row[f"v{k}_px"] = state.px
        row[f"v{k}_py"] = state.py
        row[f"v{k}_v"] = state.v
        row[f"v{k}_a"] = accel
    return row


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _vehicle_ids(records: Sequence[StepRecord]) -> Tuple[int, ...]:
    ids = records[0].vehicle_ids
    for record in records:
        if record.vehicle_ids != ids:
            raise ValidationError(f"vehicle set changes at t={record.time}: {record.vehicle_ids} != {ids}")
    return ids


def _write_csv(path: Path, columns: List[str], rows: List[Dict[str, Any]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row[c]) for c in columns])


def _write_jsonl(path: Path, columns: List[str], rows: List[Dict[str, Any]]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps({c: row[c] for c in columns}) + "\n")


def export(
    records: Sequence[StepRecord],
    output_dir: Union[str, Path],
    fmt: str = "csv",
    summary: Optional[Mapping[str, Any]] = None,
) -> List[Path]:
    """
    Write a trace and its summary document.

    Parameters
    ----------
    records : sequence of StepRecord
        Non-empty trace with a constant vehicle set.
    output_dir : str or Path
        Directory to write into; created if missing.
    fmt : str, optional
        ``"csv"`` (default) or ``"jsonl"``.
    summary : mapping, optional
        Written as ``summary.json`` when given.

    Returns
    -------
    list of Path
        The files written.

    Raises
    ------
    ValidationError
        If the trace is empty or ``fmt`` is unknown.
    TraceIOError
        If a file cannot be written.
    """
    if not records:
        raise ValidationError("cannot export an empty trace")
    if fmt not in TRACE_FILES:
        raise ValidationError(f"unknown trace format {fmt!r}; expected one of {sorted(TRACE_FILES)}")
    columns = trace_columns(_vehicle_ids(records))
    rows = [record_to_row(r) for r in records]

    output_dir = Path(output_dir)
    trace_path = output_dir / TRACE_FILES[fmt]
    written = [trace_path]
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            _write_csv(trace_path, columns, rows)
        else:
            _write_jsonl(trace_path, columns, rows)
        if summary is not None:
            summary_path = output_dir / SUMMARY_FILE
            summary_path.write_text(json.dumps(dict(summary), indent=2) + "\n", encoding="utf-8")
            written.append(summary_path)
    except OSError as exc:
        logger.error("Cannot write trace to %s: %s", output_dir, exc)
        raise TraceIOError(exc.filename or output_dir, exc.strerror or str(exc)) from exc
    logger.debug("wrote %d trace rows to %s", len(rows), trace_path)
    return written


def _parse_cell(column: str, value: Any) -> Any:
    if column == "mode":
        return str(value)
    if column in _INT_COLUMNS:
        return int(value)
    return float(value)


def _row_to_record(row: Mapping[str, Any], vehicle_ids: Sequence[int]) -> StepRecord:
    return StepRecord(
        time=row["t"],
        ego_state=VehicleState(row["ego_px"], row["ego_py"], row["ego_v"], row["ego_theta"]),
        ego_control=ControlInput(row["ego_a"], row["ego_thetadot"]),
        vehicle_ids=tuple(vehicle_ids),
        vehicle_states=tuple(
            VehicleState(row[f"v{k}_px"], row[f"v{k}_py"], row[f"v{k}_v"], 0.0) for k in vehicle_ids
        ),
        vehicle_accels=tuple(row[f"v{k}_a"] for k in vehicle_ids),
        mode=row["mode"],
        path_rung=row["path_rung"],
        solve_ms=row["solve_ms"],
        solver_iters=row["solver_iters"],
        min_separation=row["min_separation"],
    )


def _ids_from_columns(columns: Sequence[str]) -> List[int]:
    if list(columns[:len(BASE_COLUMNS)]) != list(BASE_COLUMNS):
        raise ValidationError("trace header does not start with the base columns")
    extra = columns[len(BASE_COLUMNS):]
    if len(extra) % len(VEHICLE_FIELDS):
        raise ValidationError("trace header has an incomplete vehicle block")
    return [int(extra[i][1:].split("_", 1)[0]) for i in range(0, len(extra), len(VEHICLE_FIELDS))]


def read_trace(path: Union[str, Path]) -> List[StepRecord]:
    """
    Read a trace written by :func:`export`.

    The format follows the file suffix. Surrounding vehicles come back with
    ``theta = 0``, which is the only heading they ever take.

    Raises
    ------
    TraceIOError
        If the file cannot be read.
    ValidationError
        If the content does not follow the trace schema.
    """
    path = Path(path)
    try:
        with path.open("r", newline="", encoding="utf-8") as fh:
            if path.suffix == ".csv":
                reader = csv.reader(fh)
                columns = next(reader)
                raw = [dict(zip(columns, values)) for values in reader]
            else:
                raw = [json.loads(line) for line in fh if line.strip()]
                columns = list(raw[0]) if raw else list(BASE_COLUMNS)
    except OSError as exc:
        logger.error("Cannot read trace %s: %s", path, exc)
        raise TraceIOError(path, exc.strerror or str(exc)) from exc
    except (StopIteration, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: malformed trace ({exc})") from exc

    vehicle_ids = _ids_from_columns(columns)
    records = []
    for row in raw:
        parsed = {c: _parse_cell(c, row[c]) for c in columns}
        records.append(_row_to_record(parsed, vehicle_ids))
    return records


def timing_histogram(records: Sequence[StepRecord], bins: Union[int, Sequence[float]] = 20) -> Tuple[np.ndarray, np.ndarray]:
    """
    Distribution of the per-solve computation time.

    Only rows on which a solve ran (``solve_ms > 0``) contribute.

    Returns
    -------
    tuple of numpy.ndarray
        ``(counts, bin_edges)`` as returned by :func:`numpy.histogram`.
    """
    samples = np.array([r.solve_ms for r in records if r.solve_ms > 0.0 and math.isfinite(r.solve_ms)])
    if samples.size == 0:
        raise ValidationError("trace has no solve timings")
    return np.histogram(samples, bins=bins)
