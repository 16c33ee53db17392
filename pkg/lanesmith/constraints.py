"""
Mechanical and safety constraints and their exponential barriers.

Every residual follows the convention ``residual >= 0`` when the constraint
is satisfied. Gradients are taken over the six stage variables
``[px, py, v, theta, a, theta_dot]``. The batched functions evaluate a whole
horizon at once; the scalar functions wrap them so both always agree.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import ValidationError
from .vehicle_model import (
    AXLES,
    CONTROL_DIM,
    STATE_DIM,
    Axle,
    ControlInput,
    EgoParams,
    VehicleState,
    circle_centers,
)

STAGE_DIM = STATE_DIM + CONTROL_DIM

# exp(80) keeps hessian weights finite for any residual.
_MAX_EXPONENT = 80.0


@dataclass(frozen=True)
class ObstacleEllipse:
    """
    Elliptical keep-out region around a surrounding vehicle.

    Attributes
    ----------
    center : tuple of float
        Ellipse center ``(x, y)`` in m.
    yaw : float
        Orientation of the long axis (rad).
    half_long_axis : float
        Half length of the long axis (m).
    half_short_axis : float
        Half length of the short axis (m).
    """
    center: Tuple[float, float]
    yaw: float
    half_long_axis: float
    half_short_axis: float

    def __post_init__(self):
        if not self.half_long_axis >= self.half_short_axis > 0.0:
            raise ValidationError(
                f"ObstacleEllipse needs half_long_axis >= half_short_axis > 0, "
                f"got {self.half_long_axis} and {self.half_short_axis}"
            )
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


@dataclass(frozen=True)
class SafetyConfig:
    s_min: float = 0.1

    def __post_init__(self):
        if self.s_min < 0.0:
            raise ValidationError(f"SafetyConfig.s_min must be non-negative, got {self.s_min}")


@dataclass(frozen=True)
class BarrierParams:
    """Scale ``q1`` and steepness ``q2`` of ``q1 * exp(-q2 * residual)``."""
    q1: float = 1.0
    q2: float = 5.0

    def __post_init__(self):
        if self.q1 <= 0.0 or self.q2 <= 0.0:
            raise ValidationError(f"BarrierParams needs q1 > 0 and q2 > 0, got {self.q1}, {self.q2}")


@dataclass(frozen=True, eq=False)
class ConstraintResidual:
    value: float
    gradient: np.ndarray

    def __post_init__(self):
        gradient = np.asarray(self.gradient, dtype=float)
        if gradient.shape != (STAGE_DIM,):
            raise ValidationError(f"ConstraintResidual.gradient must have shape (6,), got {gradient.shape}")
        object.__setattr__(self, "gradient", gradient)


@dataclass(frozen=True, eq=False)
class BarrierTerm:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def ellipse_arrays(obstacles_per_stage) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Stack stage-indexed obstacle lists into arrays.

    Every stage must hold the same number of obstacles ``K``.

    Returns
    -------
    tuple of numpy.ndarray
        ``centers (M, K, 2)``, ``yaws (M, K)``, ``half_long (M, K)``, ``half_short (M, K)``.
    """
    counts = {len(stage) for stage in obstacles_per_stage}
    if len(counts) > 1:
        raise ValidationError(f"every stage needs the same number of obstacles, got counts {sorted(counts)}")
    m = len(obstacles_per_stage)
    k = counts.pop() if counts else 0
    centers = np.zeros((m, k, 2))
    yaws = np.zeros((m, k))
    half_long = np.ones((m, k))
    half_short = np.ones((m, k))
    for i, stage in enumerate(obstacles_per_stage):
        for j, obstacle in enumerate(stage):
            centers[i, j] = obstacle.center
            yaws[i, j] = obstacle.yaw
            half_long[i, j] = obstacle.half_long_axis
            half_short[i, j] = obstacle.half_short_axis
    return centers, yaws, half_long, half_short


def safety_residuals(
    states: np.ndarray,
    centers: np.ndarray,
    yaws: np.ndarray,
    half_long: np.ndarray,
    half_short: np.ndarray,
    ego: EgoParams,
    s_min: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched ego-circle versus inflated-ellipse residuals.

    Parameters
    ----------
    states : numpy.ndarray
        Ego states, shape ``(M, 4)``.
    centers, yaws, half_long, half_short : numpy.ndarray
        Obstacle arrays as returned by :func:`ellipse_arrays`.
    ego : EgoParams
        Supplies the wheelbase and the circle radius.
    s_min : float
        Safety margin added to both ellipse axes.

    Returns
    -------
    tuple of numpy.ndarray
        Residuals of shape ``(M, K, 2)`` (axle order as :data:`AXLES`) and
        their state gradients of shape ``(M, K, 2, 4)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    front, rear = circle_centers(states, ego.wheelbase)
    circles = np.stack([front, rear], axis=1)

    cos_y = np.cos(yaws)[:, :, None]
    sin_y = np.sin(yaws)[:, :, None]
    rel = circles[:, None, :, :] - centers[:, :, None, :]
    local_x = cos_y * rel[..., 0] + sin_y * rel[..., 1]
    local_y = -sin_y * rel[..., 0] + cos_y * rel[..., 1]

    inflation = ego.circle_radius + s_min
    axis_a2 = ((half_long + inflation) ** 2)[:, :, None]
    axis_b2 = ((half_short + inflation) ** 2)[:, :, None]
    values = local_x ** 2 / axis_a2 + local_y ** 2 / axis_b2 - 1.0

    dlx = 2.0 * local_x / axis_a2
    dly = 2.0 * local_y / axis_b2
    grad_x = dlx * cos_y - dly * sin_y
    grad_y = dlx * sin_y + dly * cos_y

    grads = np.zeros(values.shape + (STATE_DIM,))
    grads[..., 0] = grad_x
    grads[..., 1] = grad_y
    theta = states[:, 3][:, None]
    grads[:, :, 0, 3] = ego.wheelbase * (-np.sin(theta) * grad_x[:, :, 0] + np.cos(theta) * grad_y[:, :, 0])
    return values, grads


def safety_residual(
    ego_state: VehicleState,
    ego: EgoParams,
    obstacle: ObstacleEllipse,
    cfg: SafetyConfig,
    axle: Axle,
) -> ConstraintResidual:
    """
    Residual of one ego circle against one inflated obstacle ellipse.

    The circle center is expressed in the obstacle frame and tested against
    the ellipse whose axes are grown by ``circle_radius + s_min``; the result
    is ``-1`` at the ellipse center and ``0`` on its boundary.
    """
    centers, yaws, half_long, half_short = ellipse_arrays([[obstacle]])
    values, grads = safety_residuals(
        ego_state.as_array()[None, :], centers, yaws, half_long, half_short, ego, cfg.s_min
    )
    index = AXLES.index(axle)
    gradient = np.zeros(STAGE_DIM)
    gradient[:STATE_DIM] = grads[0, 0, index]
    return ConstraintResidual(float(values[0, 0, index]), gradient)


def control_residuals(
    states: np.ndarray,
    controls: np.ndarray,
    ego: EgoParams,
    bound_speeds: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched acceleration and yaw-rate bound residuals.

    Parameters
    ----------
    states, controls : numpy.ndarray
        Shapes ``(M, 4)`` and ``(M, 2)``.
    ego : EgoParams
        Acceleration bounds, steering limits and wheelbase.
    bound_speeds : numpy.ndarray, optional
        Speeds that set the yaw-rate bounds instead of ``states[:, 2]``.
        The bounds then no longer depend on the state and the speed column
        of the gradients is zero.

    Returns
    -------
    tuple of numpy.ndarray
        Residuals of shape ``(M, 4)`` ordered ``a - a_min``, ``a_max - a``,
        ``theta_dot - theta_dot_min(v)``, ``theta_dot_max(v) - theta_dot``,
        and the constant stage gradients of shape ``(4, 6)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    tan_min = math.tan(ego.delta_min)
    tan_max = math.tan(ego.delta_max)
    v = states[:, 2] if bound_speeds is None else np.asarray(bound_speeds, dtype=float)
    a = controls[:, 0]
    theta_dot = controls[:, 1]
    values = np.stack([
        a - ego.a_min,
        ego.a_max - a,
        # operation order matches clamp_control
        theta_dot - v * tan_min / ego.wheelbase,
        v * tan_max / ego.wheelbase - theta_dot,
    ], axis=1)
    speed_column = (0.0, 0.0) if bound_speeds is not None else (-tan_min / ego.wheelbase, tan_max / ego.wheelbase)
    grads = np.array([
        [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, speed_column[0], 0.0, 0.0, 1.0],
        [0.0, 0.0, speed_column[1], 0.0, 0.0, -1.0],
    ])
    return values, grads


def control_bound_residuals(control: ControlInput, state: VehicleState, ego: EgoParams) -> List[ConstraintResidual]:
    """Four mechanical-bound residuals for one stage, see :func:`control_residuals`."""
    values, grads = control_residuals(state.as_array()[None, :], control.as_array()[None, :], ego)
    return [ConstraintResidual(float(values[0, j]), grads[j]) for j in range(4)]


def barrier_weights(values: np.ndarray, params: BarrierParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Barrier cost and its first two derivatives with respect to the residual.

    Returns
    -------
    tuple of numpy.ndarray
        ``q1 exp(-q2 r)``, ``-q2 * cost`` and ``q2**2 * cost``, elementwise.
    """
    cost = params.q1 * np.exp(np.minimum(-params.q2 * np.asarray(values, dtype=float), _MAX_EXPONENT))
    return cost, -params.q2 * cost, params.q2 ** 2 * cost


def barrier(residual: ConstraintResidual, params: BarrierParams) -> BarrierTerm:
    """
    Exponential barrier of a residual with a Gauss-Newton hessian.

    The residual's own curvature is dropped, which keeps the hessian
    ``q1 q2^2 exp(-q2 r) grad grad^T`` positive semidefinite.
    """
    cost, d1, d2 = barrier_weights(np.array([residual.value]), params)
    g = residual.gradient
    return BarrierTerm(float(cost[0]), d1[0] * g, d2[0] * np.outer(g, g))
