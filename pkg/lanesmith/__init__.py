from .vehicle_model import (
    VehicleState,
    ControlInput,
    EgoParams,
    Trajectory,
    step,
    rollout,
    linearize,
    ego_circles,
    yaw_rate_bounds,
)
from .constraints import (
    ObstacleEllipse,
    SafetyConfig,
    BarrierParams,
    safety_residual,
    control_bound_residuals,
    barrier,
)
from .objective import DesiredPath, CostParams, stage_cost, terminal_cost, quadratize_cost, project_to_path
from .solver import SolverConfig, BarrierSet, PlanResult, CILQRSolver, solve
from .planner import (
    SurroundingVehicle,
    LaneGeometry,
    Mode,
    PlannerConfig,
    PlannerState,
    CompletionParams,
    filter_adjacent,
    predict,
    check_safety,
    backup_command,
    detect_completion,
    plan_step,
)
from .traffic import TrafficParams, LayoutParams, World, StepRecord, surrounding_accel, world_step, build_scenario
from .config import ScenarioConfig, RunConfig, load_config
from .trace import export, read_trace, timing_histogram
from .harness import RunSummary, run_scenario, run_grid, run_path_study
from .value_spec import ValueListParser

__version__ = "0.1.0"

__all__ = [
    "VehicleState",
    "ControlInput",
    "EgoParams",
    "Trajectory",
    "step",
    "rollout",
    "linearize",
    "ego_circles",
    "yaw_rate_bounds",
    "ObstacleEllipse",
    "SafetyConfig",
    "BarrierParams",
    "safety_residual",
    "control_bound_residuals",
    "barrier",
    "DesiredPath",
    "CostParams",
    "stage_cost",
    "terminal_cost",
    "quadratize_cost",
    "project_to_path",
    "SolverConfig",
    "BarrierSet",
    "PlanResult",
    "CILQRSolver",
    "solve",
    "SurroundingVehicle",
    "LaneGeometry",
    "Mode",
    "PlannerConfig",
    "PlannerState",
    "CompletionParams",
    "filter_adjacent",
    "predict",
    "check_safety",
    "backup_command",
    "detect_completion",
    "plan_step",
    "TrafficParams",
    "LayoutParams",
    "World",
    "StepRecord",
    "surrounding_accel",
    "world_step",
    "build_scenario",
    "ScenarioConfig",
    "RunConfig",
    "load_config",
    "export",
    "read_trace",
    "timing_histogram",
    "RunSummary",
    "run_scenario",
    "run_grid",
    "run_path_study",
    "ValueListParser",
]
