"""
Interactive lane-change planner.

Every planning cycle filters the surrounding vehicles near the ego, predicts
them at constant velocity, solves the CILQR problem for the active desired
path and accepts the plan only if the raw constraints hold over the whole
horizon. Rejected plans walk a ladder of alternative desired paths
(target lane, partial attempt, abort to the original lane); if every rung
fails, the ego brakes in its lane.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .constraints import ObstacleEllipse, SafetyConfig, control_residuals, safety_residuals
from .errors import DivergenceError, ValidationError
from .objective import RAMP_AHEAD, RAMP_BEHIND, CostParams, DesiredPath
from .solver import BarrierSet, CILQRSolver, PlanningProblem, PlanResult, SolverConfig
from .vehicle_model import (
    AXLES,
    ControlInput,
    EgoParams,
    Trajectory,
    VehicleState,
    footprint_center,
    normalize_angle,
    shift_controls,
    yaw_rate_bounds,
)

logger = logging.getLogger(__name__)

CONTROL_CONSTRAINTS = ("a_min", "a_max", "yaw_rate_min", "yaw_rate_max")

_TARGET_RUNGS = ("target_offset", "target_center")


@dataclass(frozen=True)
class SurroundingVehicle:
    """
    A non-ego vehicle with its footprint and reaction parameters.

    The state reference point is the footprint center. Ellipse axes and the
    reaction gap are derived from the current speed.

    Attributes
    ----------
    id : int
        Vehicle index.
    state : VehicleState
        Current state.
    length, width : float
        Footprint size (m).
    ellipse_headway : float
        Seconds of travel added to the ellipse half long axis.
    reaction_time : float
        Seconds of travel that make up the reaction gap.
    min_reaction_gap : float
        Lower bound on the speed-dependent part of the reaction gap (m).
    reaction_margin : float
        Added to the half width to form the reaction disc radius (m).
    """
    id: int
    state: VehicleState
    length: float = 4.5
    width: float = 1.8
    ellipse_headway: float = 0.2
    reaction_time: float = 1.0
    min_reaction_gap: float = 2.0
    reaction_margin: float = 0.2

    def __post_init__(self):
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValidationError(f"vehicle {self.id}: length and width must be positive")
        if min(self.ellipse_headway, self.reaction_time, self.min_reaction_gap, self.reaction_margin) < 0.0:
            raise ValidationError(f"vehicle {self.id}: reaction and ellipse parameters must be non-negative")

    @property
    def ellipse_a(self) -> float:
        return self.ellipse_a_at(self.state.v)

    @property
    def ellipse_b(self) -> float:
        return 0.5 * self.width

    @property
    def reaction_gap(self) -> float:
        """Center-to-center distance ``s_k`` below which a leader forces braking."""
        return self.length + max(self.min_reaction_gap, self.reaction_time * self.state.v)

    @property
    def disc_radius(self) -> float:
        return 0.5 * self.width + self.reaction_margin

    def ellipse_a_at(self, v: float) -> float:
        return 0.5 * self.length + self.ellipse_headway * max(v, 0.0)

    def ellipse_at(self, state: VehicleState) -> ObstacleEllipse:
        return ObstacleEllipse((state.px, state.py), state.theta, self.ellipse_a_at(state.v), self.ellipse_b)

    def with_state(self, state: VehicleState) -> "SurroundingVehicle":
        return SurroundingVehicle(
            self.id, state, self.length, self.width, self.ellipse_headway,
            self.reaction_time, self.min_reaction_gap, self.reaction_margin,
        )


@dataclass(frozen=True)
class LaneGeometry:
    """Centerlines of the original and target lane on a straight road."""
    original_y: float = 3.5
    target_y: float = 0.0
    width: float = 3.5

    def __post_init__(self):
        if self.width <= 0.0 or not math.isclose(abs(self.original_y - self.target_y), self.width, abs_tol=1e-9):
            raise ValidationError(
                f"lane centerlines {self.original_y} and {self.target_y} must be one lane width ({self.width}) apart"
            )

    @property
    def toward_original(self) -> float:
        """Unit lateral direction from the target lane to the original lane."""
        return 1.0 if self.original_y > self.target_y else -1.0

    def in_target_lane(self, center_y: float, half_width: float) -> bool:
        return abs(center_y - self.target_y) + half_width <= 0.5 * self.width


class Mode(Enum):
    ATTEMPTING = "attempting"
    ABORTING = "aborting"
    BACKUP = "backup"
    COMPLETED = "completed"


@dataclass(frozen=True)
class Rung:
    """One desired-path option of the fallback ladder."""
    name: str
    lateral: float
    mode: Mode

    def path(
        self,
        ego: VehicleState,
        anchor: Optional[Tuple[float, float]] = None,
        ramp_length: float = 8.0,
        ramp_segments: int = 16,
    ) -> DesiredPath:
        """
        Desired path of this rung around the current ego position.

        Aborting runs straight at ``lateral``. Every other rung ramps from
        the lane held at ``anchor`` onto ``lateral``, see
        :meth:`DesiredPath.ramp`; without an anchor it runs straight too.
        """
        if anchor is None or self.mode is Mode.ABORTING:
            return DesiredPath.horizontal(self.lateral, ego.px - RAMP_BEHIND, ego.px + RAMP_AHEAD)
        return DesiredPath.ramp(anchor, self.lateral, ego.px, ramp_length, ramp_segments)


@dataclass(frozen=True)
class PlannerConfig:
    """
    Settings of the interaction loop plus the nested module configs.

    Attributes
    ----------
    replan_stride : int
        Stages executed between solves (lambda).
    filter_window : float
        Longitudinal window of the adjacent-vehicle filter (m).
    path_offset : float
        Distance of the preferred target-lane path from the target
        centerline, toward the original lane (m).
    attempt_offset : float
        Distance of the attempt path from the original centerline, toward
        the target lane (m).
    planning_margin : float
        Extra ellipse inflation seen by the solver only (m).
    settle_steps : int
        Consecutive settled cycles in the target lane before switching to
        the target centerline.
    settle_tolerance, settle_yaw : float
        Lateral (m) and yaw (rad) tolerances of a settled cycle.
    ramp_length : float
        Longitudinal extent of the blend from the original lateral position
        onto a rung's lateral position (m).
    ramp_segments : int
        Polyline segments of that blend.
    use_fallback_ladder : bool
        When false only the preferred target-lane path is tried.
    safety_tolerance : float
        Residuals down to ``-safety_tolerance`` pass the safety check.
    """
    replan_stride: int = 1
    filter_window: float = 30.0
    path_offset: float = 0.3
    attempt_offset: float = 1.2
    planning_margin: float = 0.2
    settle_steps: int = 5
    settle_tolerance: float = 0.2
    settle_yaw: float = 0.05
    ramp_length: float = 8.0
    ramp_segments: int = 16
    use_fallback_ladder: bool = True
    safety_tolerance: float = 0.0
    ego: EgoParams = field(default_factory=EgoParams)
    cost: CostParams = field(default_factory=CostParams)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    barriers: BarrierSet = field(default_factory=BarrierSet)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not 1 <= self.replan_stride < self.solver.horizon:
            raise ValidationError(
                f"replan_stride must satisfy 1 <= lambda < N={self.solver.horizon}, got {self.replan_stride}"
            )
        if self.filter_window <= 0.0:
            raise ValidationError(f"filter_window must be positive, got {self.filter_window}")
        if self.planning_margin < 0.0 or self.safety_tolerance < 0.0:
            raise ValidationError("planning_margin and safety_tolerance must be non-negative")
        if self.settle_steps < 1:
            raise ValidationError(f"settle_steps must be at least 1, got {self.settle_steps}")
        if self.ramp_length <= 0.0 or self.ramp_segments < 1:
            raise ValidationError(
                f"ramp_length must be positive and ramp_segments at least 1, "
                f"got {self.ramp_length} and {self.ramp_segments}"
            )


@dataclass
class PlannerState:
    """
    Mutable state carried between planning cycles.

    ``previous_solution`` holds the last accepted control sequence already
    shifted by ``lam`` stages, ready to warm-start the next solve.
    ``anchor`` is the ego position of the first cycle; the desired paths
    ramp away from it.
    """
    lam: int = 1
    mode: Mode = Mode.ATTEMPTING
    active_path: Optional[DesiredPath] = None
    active_rung: Optional[str] = None
    active_lateral: Optional[float] = None
    anchor: Optional[Tuple[float, float]] = None
    previous_solution: Optional[np.ndarray] = None
    fallback_ladder: Tuple[Rung, ...] = ()
    lane_change_done: bool = False
    settle_count: int = 0

    @classmethod
    def initial(cls, config: PlannerConfig) -> "PlannerState":
        return cls(lam=config.replan_stride)


@dataclass(frozen=True)
class PredictionSet:
    """
    Constant-velocity predictions of the filtered vehicles.

    ``states[k]`` holds the ``N + 1`` predicted states of ``vehicles[k]``
    as an array of shape ``(N + 1, 4)``.
    """
    vehicles: Tuple[SurroundingVehicle, ...]
    states: np.ndarray
    dt: float

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[0] != len(self.vehicles) or states.shape[2] != 4:
            raise ValidationError(f"PredictionSet states must have shape (K, N+1, 4), got {states.shape}")
        object.__setattr__(self, "states", states)

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    def sequence(self, vehicle_id: int) -> List[VehicleState]:
        for k, vehicle in enumerate(self.vehicles):
            if vehicle.id == vehicle_id:
                return [VehicleState.from_array(row) for row in self.states[k]]
        raise KeyError(vehicle_id)

    def obstacles(self) -> List[List[ObstacleEllipse]]:
        """Stage-indexed ellipses, one per vehicle per stage."""
        stages = []
        for i in range(self.horizon + 1):
            stages.append([
                vehicle.ellipse_at(VehicleState.from_array(self.states[k, i]))
                for k, vehicle in enumerate(self.vehicles)
            ])
        return stages

    def ellipse_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stage-major obstacle arrays, see :func:`lanesmith.constraints.ellipse_arrays`."""
        stacked = np.transpose(self.states, (1, 0, 2))
        centers = stacked[:, :, 0:2]
        yaws = stacked[:, :, 3]
        half_long = np.array([[v.ellipse_a_at(s) for v, s in zip(self.vehicles, row)] for row in stacked[:, :, 2]])
        half_long = half_long.reshape(yaws.shape)
        half_short = np.tile([v.ellipse_b for v in self.vehicles], (stacked.shape[0], 1)).reshape(yaws.shape)
        return centers, yaws, half_long, half_short


@dataclass(frozen=True)
class Violation:
    stage: int
    vehicle_id: Optional[int]
    constraint: str
    residual: float


@dataclass(frozen=True)
class SafetyVerdict:
    safe: bool
    violations: Tuple[Violation, ...] = ()


@dataclass(frozen=True, eq=False)
class PlanStep:
    """
    Controls emitted by one planning cycle together with its diagnostics.

    ``problem`` and ``result`` belong to the accepted rung, or to the last
    rung tried when the cycle fell back to braking.
    """
    controls: Tuple[ControlInput, ...]
    mode: Mode
    rung: int
    result: Optional[PlanResult]
    verdict: Optional[SafetyVerdict]
    solve_time_ms: float
    solver_iterations: int
    problem: Optional[PlanningProblem] = None


def filter_adjacent(
    all_vehicles: Sequence[SurroundingVehicle], ego: VehicleState, window: float
) -> List[SurroundingVehicle]:
    """
    Keep vehicles within ``window`` of the ego longitudinally.

    The interval is closed and the input order is preserved.

    Raises
    ------
    ValidationError
        If ``window`` is not positive.
    """
    if window <= 0.0:
        raise ValidationError(f"filter window must be positive, got {window}")
    return [vehicle for vehicle in all_vehicles if abs(vehicle.state.px - ego.px) <= window]


def predict(vehicle: SurroundingVehicle, horizon: int, dt: float) -> List[VehicleState]:
    """Constant speed, constant yaw prediction over ``horizon`` stages."""
    s = vehicle.state
    vx = s.v * math.cos(s.theta)
    vy = s.v * math.sin(s.theta)
    return [VehicleState(s.px + i * dt * vx, s.py + i * dt * vy, s.v, s.theta) for i in range(horizon + 1)]


def predict_all(vehicles: Sequence[SurroundingVehicle], horizon: int, dt: float) -> PredictionSet:
    states = np.array([[x.as_array() for x in predict(v, horizon, dt)] for v in vehicles]).reshape(
        len(vehicles), horizon + 1, 4
    )
    return PredictionSet(tuple(vehicles), states, dt)


def check_safety(
    trajectory: Trajectory,
    predictions: PredictionSet,
    ego: EgoParams,
    safety: SafetyConfig,
    tolerance: float = 0.0,
) -> SafetyVerdict:
    """
    Evaluate the raw constraints of a planned trajectory.

    Both ego circles are tested against every predicted ellipse at stages
    ``0..N`` and the mechanical bounds at stages ``0..N-1``.

    Parameters
    ----------
    trajectory : Trajectory
        Planned ego trajectory.
    predictions : PredictionSet
        Predictions sharing the trajectory's horizon.
    ego : EgoParams
        Ego geometry and limits.
    safety : SafetyConfig
        Safety margin, without any planning margin.
    tolerance : float, optional
        Residuals at or above ``-tolerance`` count as satisfied.

    Returns
    -------
    SafetyVerdict
        ``safe`` and the violations ordered by stage.
    """
    if predictions.horizon != trajectory.horizon:
        raise ValidationError(
            f"prediction horizon {predictions.horizon} differs from trajectory horizon {trajectory.horizon}"
        )
    violations = []
    if predictions.vehicles:
        values, _ = safety_residuals(trajectory.states, *predictions.ellipse_arrays(), ego, safety.s_min)
        for stage, k, axle in np.argwhere(values < -tolerance):
            violations.append(Violation(
                int(stage), predictions.vehicles[k].id, AXLES[axle].value, float(values[stage, k, axle])
            ))
    values, _ = control_residuals(trajectory.states[:-1], trajectory.controls, ego)
    for stage, j in np.argwhere(values < -tolerance):
        violations.append(Violation(int(stage), None, CONTROL_CONSTRAINTS[j], float(values[stage, j])))
    violations.sort(key=lambda v: v.stage)
    return SafetyVerdict(not violations, tuple(violations))


def backup_command(ego: VehicleState, ego_params: EgoParams, lam: int, dt: float) -> List[ControlInput]:
    """
    Brake without reversing and steer the yaw back to zero.

    Each control uses ``a = max(a_min, -v / dt)`` and a yaw rate of
    ``-theta / dt`` clipped to the bounds at the current speed.
    """
    v = ego.v
    theta = ego.theta
    controls = []
    for _ in range(lam):
        a = max(ego_params.a_min, -v / dt)
        low, high = yaw_rate_bounds(max(v, 0.0), ego_params)
        theta_dot = min(max(-theta / dt, low), high)
        controls.append(ControlInput(a, theta_dot))
        v = max(v + dt * a, 0.0)
        theta = normalize_angle(theta + dt * theta_dot)
    return controls


@dataclass(frozen=True)
class CompletionParams:
    hold_steps: int = 10
    lateral_tolerance: float = 0.2
    yaw_tolerance: float = 0.05

    def __post_init__(self):
        if self.hold_steps < 1:
            raise ValidationError(f"hold_steps must be at least 1, got {self.hold_steps}")


def detect_completion(
    ego: VehicleState,
    target_centerline_y: float,
    history: Sequence[VehicleState],
    params: Optional[CompletionParams] = None,
) -> bool:
    """
    True once the ego has held the target centerline for ``hold_steps`` steps.

    Parameters
    ----------
    ego : VehicleState
        Latest executed ego state.
    target_centerline_y : float
        Lateral position of the target centerline (m).
    history : sequence of VehicleState
        Earlier executed ego states, oldest first.
    params : CompletionParams, optional
        Window length and tolerances.
    """
    params = params or CompletionParams()
    window = list(history[len(history) - (params.hold_steps - 1):]) if params.hold_steps > 1 else []
    window.append(ego)
    if len(window) < params.hold_steps:
        return False
    return all(
        abs(s.py - target_centerline_y) <= params.lateral_tolerance and abs(s.theta) <= params.yaw_tolerance
        for s in window
    )


def build_ladder(lanes: LaneGeometry, config: PlannerConfig, lane_change_done: bool) -> Tuple[Rung, ...]:
    """
    Ordered desired-path options for one cycle.

    After the lane change only the target centerline is kept; with the
    ladder disabled only the preferred target-lane path is tried.
    """
    toward = lanes.toward_original
    if lane_change_done:
        return (Rung("target_center", lanes.target_y, Mode.COMPLETED),)
    preferred = Rung("target_offset", lanes.target_y + toward * config.path_offset, Mode.ATTEMPTING)
    if not config.use_fallback_ladder:
        return (preferred,)
    return (
        preferred,
        Rung("target_center", lanes.target_y, Mode.ATTEMPTING),
        Rung("attempt", lanes.original_y - toward * config.attempt_offset, Mode.ATTEMPTING),
        Rung("abort", lanes.original_y, Mode.ABORTING),
    )


def _update_settle(ego: VehicleState, state: PlannerState, lanes: LaneGeometry, config: PlannerConfig) -> None:
    if state.lane_change_done or state.mode is not Mode.ATTEMPTING or state.active_rung not in _TARGET_RUNGS:
        state.settle_count = 0
        return
    path_y = state.active_lateral
    _, center_y = footprint_center(ego, config.ego)
    settled = (
        lanes.in_target_lane(center_y, 0.5 * config.ego.width)
        and abs(ego.py - path_y) <= config.settle_tolerance
        and abs(ego.theta) <= config.settle_yaw
    )
    state.settle_count = state.settle_count + 1 if settled else 0
    if state.settle_count >= config.settle_steps:
        state.lane_change_done = True
        logger.info("ego settled in the target lane; tracking the target centerline")


def plan_step(
    ego: VehicleState,
    vehicles: Sequence[SurroundingVehicle],
    state: PlannerState,
    config: PlannerConfig,
    lanes: LaneGeometry,
    solver: Optional[CILQRSolver] = None,
) -> PlanStep:
    """
    Run one planning cycle and update ``state`` in place.

    Parameters
    ----------
    ego : VehicleState
        Measured ego state.
    vehicles : sequence of SurroundingVehicle
        All surrounding vehicles.
    state : PlannerState
        Carried planner state, updated with the new mode, path and warm start.
    config : PlannerConfig
        Planner settings.
    lanes : LaneGeometry
        Original and target lane.
    solver : CILQRSolver, optional
        Reused solver instance; built from ``config.solver`` if omitted.

    Returns
    -------
    PlanStep
        ``state.lam`` controls that satisfy the mechanical bounds, and the
        diagnostics of the accepted rung (``rung == -1`` for backup).
    """
    solver = solver or CILQRSolver(config.solver)
    horizon = config.solver.horizon
    dt = config.solver.dt
    lam = state.lam
    if not 1 <= lam < horizon:
        raise ValidationError(f"PlannerState.lam must satisfy 1 <= lambda < N={horizon}, got {lam}")

    if state.anchor is None:
        state.anchor = (ego.px, ego.py)
    _update_settle(ego, state, lanes, config)
    ladder = build_ladder(lanes, config, state.lane_change_done)
    state.fallback_ladder = ladder

    nearby = filter_adjacent(vehicles, ego, config.filter_window)
    predictions = predict_all(nearby, horizon, dt)
    ellipses = predictions.ellipse_arrays()
    planning_safety = SafetyConfig(config.safety.s_min + config.planning_margin)

    total_ms = 0.0
    total_iterations = 0
    last_problem = None
    last_result = None
    last_verdict = None
    for index, rung in enumerate(ladder):
        path = rung.path(ego, state.anchor, config.ramp_length, config.ramp_segments)
        problem = PlanningProblem(ego, ellipses, config.cost, path, config.ego, planning_safety, config.barriers, dt)
        try:
            result = solver.solve(problem, state.previous_solution)
        except DivergenceError as exc:
            logger.debug("rung %s diverged: %s", rung.name, exc)
            continue
        total_ms += result.solve_time_ms
        total_iterations += result.iterations
        verdict = check_safety(result.trajectory, predictions, config.ego, config.safety, config.safety_tolerance)
        last_problem, last_result, last_verdict = problem, result, verdict
        if not verdict.safe:
            logger.debug("rung %s rejected with %d violations", rung.name, len(verdict.violations))
            continue

        controls = tuple(result.trajectory.control(i) for i in range(lam))
        if state.mode is not rung.mode:
            logger.info("planner mode %s -> %s (rung %s)", state.mode.value, rung.mode.value, rung.name)
        state.mode = rung.mode
        state.active_path = path
        state.active_rung = rung.name
        state.active_lateral = rung.lateral
        state.previous_solution = shift_controls(result.trajectory.controls, lam)
        return PlanStep(controls, rung.mode, index, result, verdict, total_ms, total_iterations, problem)

    if state.mode is not Mode.BACKUP:
        logger.warning("every rung rejected at px=%.2f; braking in lane", ego.px)
    state.mode = Mode.BACKUP
    state.previous_solution = None
    controls = tuple(backup_command(ego, config.ego, lam, dt))
    return PlanStep(controls, Mode.BACKUP, -1, last_result, last_verdict, total_ms, total_iterations, last_problem)
