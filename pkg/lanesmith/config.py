"""
Run configuration and its JSON representation.

Every parameter lives in a frozen dataclass. JSON documents mirror the field
names; keys that are absent take their defaults and unknown keys are
rejected with the dotted path of the offending entry.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union, get_args, get_origin, get_type_hints

from .errors import ConfigError, ValidationError
from .planner import CompletionParams, PlannerConfig
from .traffic import LayoutParams, TrafficParams

logger = logging.getLogger(__name__)

TRACE_FORMATS = ("csv", "jsonl")


@dataclass(frozen=True)
class ScenarioConfig:
    """Initial speed ``v0`` (m/s), bumper-to-bumper gap ``d0`` (m) and layout."""
    v0: float = 2.0
    d0: float = 10.0
    layout: LayoutParams = field(default_factory=LayoutParams)
    traffic: TrafficParams = field(default_factory=TrafficParams)


@dataclass(frozen=True)
class RunConfig:
    """
    Everything needed to reproduce one closed-loop run.

    Attributes
    ----------
    scenario : ScenarioConfig
        Initial condition and layout.
    planner : PlannerConfig
        Planner and all nested module configs. The simulation step equals
        ``planner.solver.dt``.
    completion : CompletionParams
        Lane-change completion predicate.
    sim_duration_s : float
        Simulated time budget (s).
    random_seed : int
        Reserved; every default is deterministic.
    output_dir : str, optional
        Where trace and summary files go; nothing is written when unset.
    trace_format : str
        ``"csv"`` or ``"jsonl"``.
    """
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    completion: CompletionParams = field(default_factory=CompletionParams)
    sim_duration_s: float = 30.0
    random_seed: int = 0
    output_dir: Optional[str] = None
    trace_format: str = "csv"

    def __post_init__(self):
        if not self.sim_duration_s > 0.0:
            raise ValidationError(f"sim_duration_s must be positive, got {self.sim_duration_s}")
        if self.trace_format not in TRACE_FORMATS:
            raise ValidationError(f"trace_format must be one of {TRACE_FORMATS}, got {self.trace_format!r}")


def _convert(tp: Any, value: Any, path: str) -> Any:
    origin = get_origin(tp)
    args = get_args(tp)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        tp = next(arg for arg in args if arg is not type(None))
        origin = get_origin(tp)
        args = get_args(tp)

    if is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return tuple(_convert(args[0], item, f"{path}[{i}]") for i, item in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp!r}")


def _build(cls: type, data: Any, path: str) -> Any:
    where = path or "<root>"
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = [f.name for f in fields(cls) if f.init]
    unknown = sorted(set(data) - set(names))
    if unknown:
        keys = ", ".join(f"{path}.{key}" if path else key for key in unknown)
        raise ConfigError(f"unknown configuration key(s): {keys}")
    kwargs = {
        name: _convert(hints[name], data[name], f"{path}.{name}" if path else name)
        for name in names
        if name in data
    }
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValidationError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """
    Build a :class:`RunConfig` from a nested dictionary.

    Raises
    ------
    ConfigError
        On unknown keys, wrong value types or violated invariants.
    """
    return _build(RunConfig, data, "")


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Inverse of :func:`config_from_dict`; tuples become lists."""
    return json.loads(json.dumps(asdict(config)))


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    Read a JSON run configuration.

    Raises
    ------
    ConfigError
        If the file cannot be read or parsed, or its content is invalid.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        logger.error("Cannot read config %s: %s", path, exc)
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        logger.error("Config %s is not valid JSON: %s", path, exc)
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def with_overrides(
    config: RunConfig,
    duration: Optional[float] = None,
    lam: Optional[int] = None,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    v0: Optional[float] = None,
    d0: Optional[float] = None,
) -> RunConfig:
    """Apply command-line overrides; ``None`` leaves a field unchanged."""
    scenario = config.scenario
    if v0 is not None:
        scenario = replace(scenario, v0=v0)
    if d0 is not None:
        scenario = replace(scenario, d0=d0)
    planner = config.planner if lam is None else replace(config.planner, replan_stride=lam)
    return replace(
        config,
        scenario=scenario,
        planner=planner,
        sim_duration_s=config.sim_duration_s if duration is None else duration,
        random_seed=config.random_seed if seed is None else seed,
        output_dir=config.output_dir if output_dir is None else str(output_dir),
    )
