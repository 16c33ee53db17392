"""
Closed-loop traffic world.

Surrounding vehicles keep their lane and follow a non-cooperative rule:
brake as hard as allowed when another vehicle is close ahead of them,
otherwise accelerate back toward ``v_max``. All accelerations are computed
from the pre-step snapshot, so update order does not matter. Collisions and
separations are measured on the true rectangular footprints.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

from shapely.geometry import Polygon

from .errors import InvalidScenarioError, ValidationError
from .planner import LaneGeometry, SurroundingVehicle
from .vehicle_model import ControlInput, EgoParams, VehicleState, footprint_center, step, yaw_rate_bounds

logger = logging.getLogger(__name__)

EGO_ID = -1

# Slack on the control-bound check of world_step.
_BOUND_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TrafficParams:
    """Acceleration limits and cruise speed of the surrounding vehicles; ``v_max=None`` means ``v0``."""
    v_max: Optional[float] = None
    a_min: float = -4.0
    a_max: float = 2.0

    def __post_init__(self):
        if not self.a_min < 0.0 < self.a_max:
            raise ValidationError(f"TrafficParams needs a_min < 0 < a_max, got [{self.a_min}, {self.a_max}]")
        if self.v_max is not None and self.v_max < 0.0:
            raise ValidationError(f"TrafficParams.v_max must be non-negative, got {self.v_max}")


@dataclass(frozen=True)
class Neighbor:
    """A vehicle as seen by the reaction rule: reference point and disc radius."""
    id: int
    px: float
    py: float
    disc_radius: float

    @classmethod
    def from_vehicle(cls, vehicle: SurroundingVehicle) -> "Neighbor":
        return cls(vehicle.id, vehicle.state.px, vehicle.state.py, vehicle.disc_radius)

    @classmethod
    def from_ego(cls, ego: VehicleState, params: EgoParams, margin: float) -> "Neighbor":
        cx, cy = footprint_center(ego, params)
        return cls(EGO_ID, cx, cy, params.circle_radius + margin)


@dataclass(frozen=True)
class World:
    """
    Snapshot of the simulated road.

    Attributes
    ----------
    time : float
        Simulated time (s).
    ego : VehicleState or None
        Ego state, rear-axle reference; ``None`` simulates traffic alone.
    ego_params : EgoParams
        Ego geometry and limits.
    vehicles : tuple of SurroundingVehicle
        Surrounding vehicles ordered by id.
    lanes : LaneGeometry
        Original and target lane.
    traffic : TrafficParams
        Surrounding-vehicle limits with ``v_max`` resolved.
    dt : float
        Simulation step (s).
    ego_reaction_margin : float
        Added to the ego circle radius to form its reaction disc (m).
    """
    time: float
    ego: Optional[VehicleState]
    ego_params: EgoParams
    vehicles: Tuple[SurroundingVehicle, ...]
    lanes: LaneGeometry
    traffic: TrafficParams
    dt: float
    ego_reaction_margin: float = 0.2

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValidationError(f"World.dt must be positive, got {self.dt}")
        if self.traffic.v_max is None:
            raise ValidationError("World needs TrafficParams.v_max resolved")
        object.__setattr__(self, "vehicles", tuple(self.vehicles))

    def neighbors(self) -> List[Neighbor]:
        found = []
        if self.ego is not None:
            found.append(Neighbor.from_ego(self.ego, self.ego_params, self.ego_reaction_margin))
        found.extend(Neighbor.from_vehicle(v) for v in self.vehicles)
        return found


@dataclass(frozen=True, eq=False)
class StepRecord:
    """
    One executed step: the world at ``time`` and what was applied during it.

    ``min_separation`` is the smallest footprint distance between the ego
    and any surrounding vehicle, 0 when they overlap.
    """
    time: float
    ego_state: Optional[VehicleState]
    ego_control: Optional[ControlInput]
    vehicle_ids: Tuple[int, ...]
    vehicle_states: Tuple[VehicleState, ...]
    vehicle_accels: Tuple[float, ...]
    mode: str = ""
    path_rung: int = -1
    solve_ms: float = 0.0
    solver_iters: int = 0
    min_separation: float = math.inf
    collision: Optional[Tuple[int, int]] = None


def reaction_trigger(vehicle: SurroundingVehicle, others: Sequence[Neighbor]) -> Optional[Neighbor]:
    """
    First neighbor that forces ``vehicle`` to brake, if any.

    A neighbor triggers when it is ahead within the reaction gap and
    laterally within its disc radius plus the vehicle's half width, both
    measured center to center.
    """
    s = vehicle.state
    gap = vehicle.reaction_gap
    for other in others:
        if other.id == vehicle.id:
            continue
        ahead = other.px - s.px
        if 0.0 <= ahead <= gap and abs(other.py - s.py) <= other.disc_radius + 0.5 * vehicle.width:
            return other
    return None


def surrounding_accel(
    vehicle: SurroundingVehicle, others: Sequence[Neighbor], traffic: TrafficParams, dt: float
) -> float:
    """
    Acceleration of a surrounding vehicle under the non-cooperative rule.

    Parameters
    ----------
    vehicle : SurroundingVehicle
        The reacting vehicle.
    others : sequence of Neighbor
        Every vehicle on the road including the ego; ``vehicle`` itself is skipped.
    traffic : TrafficParams
        Limits with ``v_max`` resolved.
    dt : float
        Simulation step (s).

    Returns
    -------
    float
        ``max(a_min, -v/dt)`` when braking is triggered, otherwise
        ``min(a_max, (v_max - v)/dt)``.
    """
    v = vehicle.state.v
    trigger = reaction_trigger(vehicle, others)
    if trigger is not None:
        logger.debug("vehicle %d brakes for %d", vehicle.id, trigger.id)
        return max(traffic.a_min, -v / dt)
    return min(traffic.a_max, (traffic.v_max - v) / dt)


def footprint_polygon(cx: float, cy: float, theta: float, length: float, width: float) -> Polygon:
    """Oriented rectangle of ``length x width`` centered on ``(cx, cy)``."""
    c, s = math.cos(theta), math.sin(theta)
    hl, hw = 0.5 * length, 0.5 * width
    corners = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
    return Polygon([(cx + c * x - s * y, cy + s * x + c * y) for x, y in corners])


def footprints(world: World) -> List[Tuple[int, Polygon]]:
    """Footprints of every vehicle in id order, ego first."""
    shapes = []
    if world.ego is not None:
        cx, cy = footprint_center(world.ego, world.ego_params)
        shapes.append((EGO_ID, footprint_polygon(cx, cy, world.ego.theta, world.ego_params.length, world.ego_params.width)))
    for v in sorted(world.vehicles, key=lambda v: v.id):
        shapes.append((v.id, footprint_polygon(v.state.px, v.state.py, v.state.theta, v.length, v.width)))
    return shapes


def true_collision(world: World) -> Optional[Tuple[int, int]]:
    """
    First pair of overlapping footprints in id order, or ``None``.

    Touching rectangles count as a collision.
    """
    shapes = footprints(world)
    for i, (id_a, poly_a) in enumerate(shapes):
        for id_b, poly_b in shapes[i + 1:]:
            if poly_a.intersects(poly_b):
                return id_a, id_b
    return None


def min_separation(world: World) -> float:
    """Smallest distance between the ego footprint and any other footprint."""
    shapes = footprints(world)
    if world.ego is None or len(shapes) < 2:
        return math.inf
    ego_poly = shapes[0][1]
    return min(ego_poly.distance(poly) for _, poly in shapes[1:])


def _check_ego_control(world: World, control: ControlInput) -> None:
    params = world.ego_params
    low, high = yaw_rate_bounds(max(world.ego.v, 0.0), params)
    if not (params.a_min - _BOUND_TOLERANCE <= control.a <= params.a_max + _BOUND_TOLERANCE
            and low - _BOUND_TOLERANCE <= control.theta_dot <= high + _BOUND_TOLERANCE):
        raise ValidationError(
            f"ego control (a={control.a:.6g}, theta_dot={control.theta_dot:.6g}) outside mechanical bounds "
            f"at v={world.ego.v:.6g}"
        )


def world_step(world: World, ego_control: Optional[ControlInput]) -> Tuple[World, StepRecord]:
    """
    Advance every vehicle by one synchronous step.

    Parameters
    ----------
    world : World
        Pre-step snapshot.
    ego_control : ControlInput or None
        Control applied to the ego; must satisfy the mechanical bounds.
        Ignored when the world has no ego.

    Returns
    -------
    tuple
        The successor world and the record of the pre-step snapshot.

    Raises
    ------
    ValidationError
        If ``ego_control`` violates the mechanical bounds.
    """
    if world.ego is not None:
        if ego_control is None:
            raise ValidationError("world_step needs an ego control when the world has an ego")
        _check_ego_control(world, ego_control)

    neighbors = world.neighbors()
    accels = tuple(surrounding_accel(v, neighbors, world.traffic, world.dt) for v in world.vehicles)

    moved = []
    for vehicle, accel in zip(world.vehicles, accels):
        s = vehicle.state
        nxt = step(VehicleState(s.px, s.py, s.v, 0.0), ControlInput(accel, 0.0), world.dt)
        moved.append(vehicle.with_state(VehicleState(nxt.px, s.py, max(nxt.v, 0.0), 0.0)))

    record = StepRecord(
        time=world.time,
        ego_state=world.ego,
        ego_control=ego_control if world.ego is not None else None,
        vehicle_ids=tuple(v.id for v in world.vehicles),
        vehicle_states=tuple(v.state for v in world.vehicles),
        vehicle_accels=accels,
        min_separation=min_separation(world),
        collision=true_collision(world),
    )
    ego = step(world.ego, ego_control, world.dt) if world.ego is not None else None
    successor = replace(world, time=round(world.time + world.dt, 9), ego=ego, vehicles=tuple(moved))
    return successor, record


@dataclass(frozen=True)
class LayoutParams:
    """
    Geometry of the eight-vehicle scenario.

    ``target_phase`` places the ego between target-lane vehicles 5 and 6:
    0.5 is midway. Vehicle dimensions and reaction parameters apply to all
    surrounding vehicles.
    """
    original_y: float = 3.5
    target_y: float = 0.0
    lane_width: float = 3.5
    vehicle_length: float = 4.5
    vehicle_width: float = 1.8
    target_phase: float = 0.5
    min_spawn_gap: float = 1.0
    ellipse_headway: float = 0.2
    reaction_time: float = 1.0
    min_reaction_gap: float = 2.0
    reaction_margin: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.target_phase < 1.0:
            raise ValidationError(f"target_phase must lie in (0, 1), got {self.target_phase}")
        if self.min_spawn_gap < 0.0:
            raise ValidationError(f"min_spawn_gap must be non-negative, got {self.min_spawn_gap}")

    @property
    def lanes(self) -> LaneGeometry:
        return LaneGeometry(self.original_y, self.target_y, self.lane_width)


def build_scenario(
    v0: float,
    d0: float,
    layout: Optional[LayoutParams] = None,
    ego_params: Optional[EgoParams] = None,
    traffic: Optional[TrafficParams] = None,
    dt: float = 0.1,
) -> World:
    """
    Build the eight-vehicle lane-change scenario.

    Vehicles 0-3 drive in the original lane front to back, with the ego
    between 1 and 2; vehicles 4-7 drive in the target lane front to back,
    with the ego between 5 and 6. Same-lane vehicles are separated by a
    bumper-to-bumper gap of ``d0`` and everybody starts at ``v0``. The ego
    footprint center starts at ``x = 0``.

    Raises
    ------
    InvalidScenarioError
        If ``v0`` is negative, ``d0`` is below ``layout.min_spawn_gap`` or
        any two footprints overlap.
    """
    layout = layout or LayoutParams()
    ego_params = ego_params or EgoParams()
    traffic = traffic or TrafficParams()
    if v0 < 0.0:
        raise InvalidScenarioError(f"initial speed must be non-negative, got {v0}")
    if d0 <= 0.0 or d0 < layout.min_spawn_gap:
        raise InvalidScenarioError(f"gap d0={d0} is below the minimum spawn gap {layout.min_spawn_gap}")
    if traffic.v_max is None:
        traffic = replace(traffic, v_max=v0)

    spacing = layout.vehicle_length + d0
    phase = layout.target_phase
    placements = [
        (0, 2.0 * spacing, layout.original_y),
        (1, spacing, layout.original_y),
        (2, -spacing, layout.original_y),
        (3, -2.0 * spacing, layout.original_y),
        (4, (2.0 - phase) * spacing, layout.target_y),
        (5, (1.0 - phase) * spacing, layout.target_y),
        (6, -phase * spacing, layout.target_y),
        (7, -(1.0 + phase) * spacing, layout.target_y),
    ]
    vehicles = tuple(
        SurroundingVehicle(
            id=k,
            state=VehicleState(px, py, v0, 0.0),
            length=layout.vehicle_length,
            width=layout.vehicle_width,
            ellipse_headway=layout.ellipse_headway,
            reaction_time=layout.reaction_time,
            min_reaction_gap=layout.min_reaction_gap,
            reaction_margin=layout.reaction_margin,
        )
        for k, px, py in placements
    )
    ego = VehicleState(-0.5 * ego_params.wheelbase, layout.original_y, v0, 0.0)
    world = World(0.0, ego, ego_params, vehicles, layout.lanes, traffic, dt, layout.reaction_margin)

    overlap = true_collision(world)
    if overlap is not None:
        raise InvalidScenarioError(f"vehicles {overlap[0]} and {overlap[1]} overlap at spawn (d0={d0})")
    logger.debug("built scenario v0=%g d0=%g with spacing %.2f m", v0, d0, spacing)
    return world
