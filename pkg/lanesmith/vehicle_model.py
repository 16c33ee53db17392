"""
Kinematic bicycle model of the ego vehicle.

The state is ``[px, py, v, theta]`` with ``(px, py)`` the rear-axle center and
the control is ``[a, theta_dot]``. Dynamics are integrated with a single
explicit Euler step per stage.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError

STATE_DIM = 4
CONTROL_DIM = 2


def normalize_angle(theta: float) -> float:
    """
    Wrap an angle into ``(-pi, pi]``.

    Angles already inside the interval are returned unchanged, so the
    operation is idempotent down to the last bit.
    """
    if -math.pi < theta <= math.pi:
        return theta
    wrapped = math.pi - (math.pi - theta) % (2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def _require_finite(owner: str, **values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValidationError(f"{owner}.{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class VehicleState:
    """
    Pose and speed of a vehicle.

    Attributes
    ----------
    px : float
        Longitudinal position (m).
    py : float
        Lateral position (m).
    v : float
        Speed (m/s).
    theta : float
        Yaw angle (rad), normalized to ``(-pi, pi]`` on construction.
    """
    px: float
    py: float
    v: float
    theta: float

    def __post_init__(self):
        _require_finite("VehicleState", px=self.px, py=self.py, v=self.v, theta=self.theta)
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.v, self.theta], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "VehicleState":
        px, py, v, theta = (float(x) for x in values)
        return cls(px, py, v, theta)


@dataclass(frozen=True)
class ControlInput:
    """
    Control applied to the ego vehicle for one stage.

    Attributes
    ----------
    a : float
        Longitudinal acceleration (m/s^2).
    theta_dot : float
        Yaw rate (rad/s).
    """
    a: float
    theta_dot: float

    def __post_init__(self):
        _require_finite("ControlInput", a=self.a, theta_dot=self.theta_dot)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.theta_dot], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ControlInput":
        a, theta_dot = (float(x) for x in values)
        return cls(a, theta_dot)


def default_circle_radius(length: float, width: float) -> float:
    """Radius of two circles that cover a ``length x width`` rectangle."""
    return math.sqrt((length / 4.0) ** 2 + (width / 2.0) ** 2)


@dataclass(frozen=True)
class EgoParams:
    """
    Geometry and mechanical limits of the ego vehicle.

    ``circle_radius`` defaults to the radius that lets the two axle circles
    cover the footprint rectangle.
    """
    wheelbase: float = 2.8
    length: float = 4.5
    width: float = 1.8
    circle_radius: Optional[float] = None
    a_min: float = -4.0
    a_max: float = 2.0
    delta_min: float = -0.6
    delta_max: float = 0.6

    def __post_init__(self):
        if self.circle_radius is None:
            object.__setattr__(self, "circle_radius", default_circle_radius(self.length, self.width))
        if not self.a_min < 0.0 < self.a_max:
            raise ValidationError(f"EgoParams needs a_min < 0 < a_max, got [{self.a_min}, {self.a_max}]")
        if not self.delta_min < 0.0 < self.delta_max:
            raise ValidationError(
                f"EgoParams needs delta_min < 0 < delta_max, got [{self.delta_min}, {self.delta_max}]"
            )
        if self.wheelbase <= 0.0:
            raise ValidationError(f"EgoParams.wheelbase must be positive, got {self.wheelbase}")
        if self.circle_radius <= 0.0:
            raise ValidationError(f"EgoParams.circle_radius must be positive, got {self.circle_radius}")
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValidationError("EgoParams.length and EgoParams.width must be positive")


class Axle(Enum):
    FRONT = "front"
    REAR = "rear"


AXLES = (Axle.FRONT, Axle.REAR)


@dataclass(frozen=True)
class Trajectory:
    """
    A horizon of ``N + 1`` states and ``N`` controls with a fixed time step.

    States and controls are stored as float arrays of shape ``(N + 1, 4)``
    and ``(N, 2)``; use :meth:`state` and :meth:`control` for typed access.
    """
    states: np.ndarray
    controls: np.ndarray
    dt: float

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        controls = np.asarray(self.controls, dtype=float).reshape(-1, CONTROL_DIM)
        if states.ndim != 2 or states.shape[1] != STATE_DIM:
            raise ValidationError(f"Trajectory states must have shape (N+1, 4), got {states.shape}")
        if states.shape[0] != controls.shape[0] + 1:
            raise ValidationError(
                f"Trajectory needs len(states) == len(controls) + 1, "
                f"got {states.shape[0]} and {controls.shape[0]}"
            )
        if not self.dt > 0.0:
            raise ValidationError(f"Trajectory.dt must be positive, got {self.dt}")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def state(self, i: int) -> VehicleState:
        return VehicleState.from_array(self.states[i])

    def control(self, i: int) -> ControlInput:
        return ControlInput.from_array(self.controls[i])


def _euler(px, py, v, theta, a, theta_dot, dt):
    # Shared by step() and the solver's forward pass so both agree bit for bit.
    return (
        px + dt * v * math.cos(theta),
        py + dt * v * math.sin(theta),
        v + dt * a,
        normalize_angle(theta + dt * theta_dot),
    )


def _check_dt(dt: float) -> None:
    if not dt > 0.0:
        raise ValidationError(f"time step must be positive, got {dt}")


def derivative(state: VehicleState, control: ControlInput) -> np.ndarray:
    """
    Continuous-time state derivative of the kinematic bicycle model.

    Parameters
    ----------
    state : VehicleState
        Current state.
    control : ControlInput
        Applied control.

    Returns
    -------
    numpy.ndarray
        ``[v cos(theta), v sin(theta), a, theta_dot]``.
    """
    return np.array([
        state.v * math.cos(state.theta),
        state.v * math.sin(state.theta),
        control.a,
        control.theta_dot,
    ])


def step(state: VehicleState, control: ControlInput, dt: float) -> VehicleState:
    """
    Advance ``state`` by one explicit Euler step of length ``dt``.

    Raises
    ------
    ValidationError
        If ``dt`` is not positive.
    """
    _check_dt(dt)
    return VehicleState(*_euler(state.px, state.py, state.v, state.theta, control.a, control.theta_dot, dt))


def rollout(x0: VehicleState, controls: Sequence[ControlInput], dt: float) -> Trajectory:
    """Apply ``controls`` in order starting from ``x0``."""
    _check_dt(dt)
    states = [x0]
    for control in controls:
        states.append(step(states[-1], control, dt))
    return Trajectory(
        np.array([s.as_array() for s in states]),
        np.array([c.as_array() for c in controls]).reshape(-1, CONTROL_DIM),
        dt,
    )


def linearize(state: VehicleState, control: ControlInput, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of :func:`step` with respect to state and control.

    Returns
    -------
    tuple of numpy.ndarray
        ``A`` of shape ``(4, 4)`` and ``B`` of shape ``(4, 2)``.
    """
    _check_dt(dt)
    A, B = linearize_trajectory(state.as_array()[None, :], dt)
    return A[0], B[0]


def linearize_trajectory(states: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched Jacobians of the Euler map at every row of ``states``.

    The map is affine in the control, so only the states are needed.
    """
    states = np.asarray(states, dtype=float)
    n = states.shape[0]
    v = states[:, 2]
    cos_t = np.cos(states[:, 3])
    sin_t = np.sin(states[:, 3])

    A = np.tile(np.eye(STATE_DIM), (n, 1, 1))
    A[:, 0, 2] = dt * cos_t
    A[:, 0, 3] = -dt * v * sin_t
    A[:, 1, 2] = dt * sin_t
    A[:, 1, 3] = dt * v * cos_t

    B = np.zeros((n, STATE_DIM, CONTROL_DIM))
    B[:, 2, 0] = dt
    B[:, 3, 1] = dt
    return A, B


def circle_centers(states: np.ndarray, wheelbase: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Front- and rear-axle circle centers for a batch of states.

    Returns
    -------
    tuple of numpy.ndarray
        ``(front, rear)``, each of shape ``(M, 2)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    rear = states[:, 0:2].copy()
    front = rear + wheelbase * np.stack([np.cos(states[:, 3]), np.sin(states[:, 3])], axis=1)
    return front, rear


def ego_circles(state: VehicleState, params: EgoParams) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """
    Centers of the two circles that model the ego vehicle.

    Both circles have radius ``params.circle_radius``.

    Returns
    -------
    tuple
        ``(front_center, rear_center)`` as ``(x, y)`` pairs.
    """
    front, rear = circle_centers(state.as_array(), params.wheelbase)
    return (float(front[0, 0]), float(front[0, 1])), (float(rear[0, 0]), float(rear[0, 1]))


def footprint_center(state: VehicleState, params: EgoParams) -> Tuple[float, float]:
    """Geometric center of the ego footprint, midway between the axles."""
    half = 0.5 * params.wheelbase
    return state.px + half * math.cos(state.theta), state.py + half * math.sin(state.theta)


def _yaw_limits(v: float, params: EgoParams) -> Tuple[float, float]:
    return v * math.tan(params.delta_min) / params.wheelbase, v * math.tan(params.delta_max) / params.wheelbase


def yaw_rate_bounds(v: float, params: EgoParams) -> Tuple[float, float]:
    """
    Speed-dependent yaw-rate limits ``v tan(delta) / L``.

    Raises
    ------
    ValidationError
        If ``v`` is negative.
    """
    if v < 0.0:
        raise ValidationError(f"yaw_rate_bounds needs v >= 0, got {v}")
    return _yaw_limits(v, params)


def clamp_control(a: float, theta_dot: float, v: float, params: EgoParams, dt: float) -> Tuple[float, float]:
    """
    Project a control onto the mechanical bounds at speed ``v``.

    Acceleration is additionally limited to ``-v / dt`` so the vehicle never
    reverses within a step.
    """
    a_low = max(params.a_min, -v / dt)
    a = min(max(a, a_low), params.a_max)
    low, high = _yaw_limits(max(v, 0.0), params)
    theta_dot = min(max(theta_dot, low), high)
    return a, theta_dot


def shift_controls(controls: np.ndarray, shift: int) -> np.ndarray:
    """Drop the first ``shift`` controls and pad the tail with zeros."""
    controls = np.asarray(controls, dtype=float)
    shifted = np.zeros_like(controls)
    if shift < controls.shape[0]:
        shifted[: controls.shape[0] - shift] = controls[shift:]
    return shifted
