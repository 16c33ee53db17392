"""
Quadratic tracking cost of the lane-change problem.

Each stage penalizes acceleration, yaw rate, deviation from the reference
speed, the mismatch between the ego position and its closest point on the
desired path and the mismatch between the ego yaw and the path heading.
The terminal stage carries the state terms only, scaled by
``terminal_scale``.
"""
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .vehicle_model import CONTROL_DIM, STATE_DIM, ControlInput, Trajectory, VehicleState

RAMP_BEHIND = 20.0
RAMP_AHEAD = 250.0


@dataclass(frozen=True, eq=False)
class PathReference:
    """
    Path points and headings the cost compares a batch of states with.

    Attributes
    ----------
    points : numpy.ndarray
        Closest path point of every state, shape ``(M, 2)``.
    headings : numpy.ndarray
        Path heading at the longitudinal position of every state, shape ``(M,)``.
    """
    points: np.ndarray
    headings: np.ndarray


@dataclass(frozen=True)
class DesiredPath:
    """
    Polyline the ego vehicle should follow.

    Attributes
    ----------
    waypoints : tuple of (float, float)
        At least two ``(x, y)`` points with strictly increasing ``x``.
    """
    waypoints: Tuple[Tuple[float, float], ...]
    _points: np.ndarray = field(init=False, repr=False, compare=False)
    _headings: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        points = np.asarray(self.waypoints, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
            raise ValidationError(f"DesiredPath needs at least two (x, y) waypoints, got shape {points.shape}")
        if not np.all(np.diff(points[:, 0]) > 0.0):
            raise ValidationError("DesiredPath waypoints must have strictly increasing x")
        if not np.all(np.isfinite(points)):
            raise ValidationError("DesiredPath waypoints must be finite")
        deltas = np.diff(points, axis=0)
        segments = np.arctan2(deltas[:, 1], deltas[:, 0])
        # end vertices take their only segment, inner vertices the mean of both
        headings = np.concatenate([segments[:1], 0.5 * (segments[:-1] + segments[1:]), segments[-1:]])
        object.__setattr__(self, "waypoints", tuple((float(x), float(y)) for x, y in points))
        object.__setattr__(self, "_points", points)
        object.__setattr__(self, "_headings", headings)

    @classmethod
    def horizontal(cls, y: float, x_start: float, x_end: float) -> "DesiredPath":
        """Straight path at constant lateral position ``y``."""
        return cls(((x_start, y), (x_end, y)))

    @classmethod
    def ramp(
        cls,
        anchor: Tuple[float, float],
        y: float,
        ego_x: float,
        length: float = 8.0,
        segments: int = 16,
    ) -> "DesiredPath":
        """
        Path from the lane held at ``anchor`` onto the lateral position ``y``.

        The path runs straight at the anchor's lateral position up to the
        anchor, blends over ``length`` metres with a cubic smoothstep sampled
        at ``segments + 1`` points and then stays at ``y``. It starts
        :data:`RAMP_BEHIND` metres behind the rearmost of anchor and ego and
        ends :data:`RAMP_AHEAD` metres past the later of ego and ramp end.

        Parameters
        ----------
        anchor : (float, float)
            Ego position when the lane change was first planned.
        y : float
            Lateral position after the ramp.
        ego_x : float
            Current longitudinal ego position.
        length : float, optional
            Longitudinal extent of the blend (m).
        segments : int, optional
            Number of polyline segments of the blend.
        """
        if length <= 0.0 or segments < 1:
            raise ValidationError(f"ramp needs a positive length and segments, got {length} and {segments}")
        ax, ay = float(anchor[0]), float(anchor[1])
        s = np.linspace(0.0, 1.0, segments + 1)
        blend = np.column_stack([ax + s * length, ay + (y - ay) * (3.0 * s ** 2 - 2.0 * s ** 3)])
        start = (min(ax, ego_x) - RAMP_BEHIND, ay)
        end = (max(ego_x, ax + length) + RAMP_AHEAD, y)
        return cls((start, *map(tuple, blend), end))

    def project_many(self, points: np.ndarray) -> np.ndarray:
        """
        Closest path point for every row of ``points``.

        Each segment is projected with endpoint clamping and the nearest
        candidate wins; ties go to the earlier segment.

        Parameters
        ----------
        points : numpy.ndarray
            Query points, shape ``(M, 2)``.

        Returns
        -------
        numpy.ndarray
            Projected points, shape ``(M, 2)``.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        starts = self._points[:-1]
        deltas = self._points[1:] - starts
        rel = points[:, None, :] - starts[None, :, :]
        t = np.clip(np.sum(rel * deltas, axis=2) / np.sum(deltas * deltas, axis=1), 0.0, 1.0)
        candidates = starts[None, :, :] + t[:, :, None] * deltas[None, :, :]
        dist2 = np.sum((points[:, None, :] - candidates) ** 2, axis=2)
        best = np.argmin(dist2, axis=1)
        return candidates[np.arange(points.shape[0]), best]

    def project(self, point: Sequence[float]) -> Tuple[float, float]:
        projected = self.project_many(np.asarray(point, dtype=float)[None, :])[0]
        return float(projected[0]), float(projected[1])

    def heading_at(self, x):
        """
        Path heading at longitudinal position ``x``.

        Vertex headings are interpolated linearly in ``x`` and held constant
        beyond the first and last waypoint.
        """
        return np.interp(x, self._points[:, 0], self._headings)

    def reference(self, points: np.ndarray) -> PathReference:
        """Closest points and headings for every row of ``points``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return PathReference(self.project_many(points), self.heading_at(points[:, 0]))


def project_to_path(path: DesiredPath, point: Sequence[float]) -> Tuple[float, float]:
    """Euclidean-closest point on ``path`` to ``point``."""
    return path.project(point)


@dataclass(frozen=True)
class CostParams:
    """
    Weights of the quadratic stage cost.

    ``v_ref`` left as ``None`` is resolved to the scenario's initial speed by
    the harness, or to the current ego speed by the solver.
    """
    w_acc: float = 1.0
    w_yawrate: float = 50.0
    w_vel: float = 0.5
    v_ref: Optional[float] = None
    w_path_lat: float = 2.0
    w_path_long: float = 0.0
    w_heading: float = 8.0
    terminal_scale: float = 5.0

    def __post_init__(self):
        weights = (self.w_acc, self.w_yawrate, self.w_vel, self.w_path_lat, self.w_path_long, self.w_heading)
        if any(w < 0.0 for w in weights) or self.terminal_scale < 0.0:
            raise ValidationError("CostParams weights and terminal_scale must be non-negative")
        if not any(w > 0.0 for w in weights):
            raise ValidationError("CostParams needs at least one positive weight")

    @property
    def reference_speed(self) -> float:
        if self.v_ref is None:
            raise ValidationError("CostParams.v_ref has not been resolved")
        return self.v_ref

    def with_reference_speed(self, v_ref: float) -> "CostParams":
        return replace(self, v_ref=float(v_ref))


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """
    Second-order cost model about a trajectory, in deviation coordinates.

    Stage ``i < N`` contributes ``p[i] + q[i].dx + r[i].du + dx'Q[i]dx/2 + du'R[i]du/2``;
    index ``N`` of ``Q``, ``q`` and ``p`` holds the terminal model.
    """
    Q: np.ndarray
    q: np.ndarray
    R: np.ndarray
    r: np.ndarray
    p: np.ndarray

    @property
    def terminal(self) -> Tuple[np.ndarray, np.ndarray, float]:
        return self.Q[-1], self.q[-1], float(self.p[-1])


def _state_weights(params: CostParams) -> np.ndarray:
    return np.array([params.w_path_long, params.w_path_lat, params.w_vel, params.w_heading])


def _state_errors(states: np.ndarray, reference: PathReference, params: CostParams) -> np.ndarray:
    errors = np.empty((states.shape[0], STATE_DIM))
    errors[:, :2] = states[:, :2] - reference.points
    errors[:, 2] = states[:, 2] - params.reference_speed
    errors[:, 3] = states[:, 3] - reference.headings
    return errors


def stage_costs(
    states: np.ndarray,
    controls: np.ndarray,
    params: CostParams,
    path: DesiredPath,
    reference: Optional[PathReference] = None,
) -> np.ndarray:
    """
    Cost of every stage of a horizon, terminal cost last.

    Parameters
    ----------
    states : numpy.ndarray
        Shape ``(N + 1, 4)``.
    controls : numpy.ndarray
        Shape ``(N, 2)``.
    reference : PathReference, optional
        Path points and headings to compare with instead of those of
        ``states`` themselves, one row per state.

    Returns
    -------
    numpy.ndarray
        Shape ``(N + 1,)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    controls = np.asarray(controls, dtype=float).reshape(-1, CONTROL_DIM)
    if reference is None:
        reference = path.reference(states[:, :2])
    errors = _state_errors(states, reference, params)
    costs = np.sum(_state_weights(params) * errors ** 2, axis=1)
    costs[-1] *= params.terminal_scale
    costs[:-1] += params.w_acc * controls[:, 0] ** 2 + params.w_yawrate * controls[:, 1] ** 2
    return costs


def stage_cost(state: VehicleState, control: ControlInput, params: CostParams, path: DesiredPath) -> float:
    """
    Quadratic cost of one non-terminal stage.

    ``w_acc a^2 + w_yawrate theta_dot^2 + w_vel (v - v_ref)^2``
    ``+ w_path_lat (py - dy)^2 + w_path_long (px - dx)^2 + w_heading (theta - h)^2``
    where ``(dx, dy)`` is the projection of ``(px, py)`` onto ``path`` and
    ``h`` the path heading at ``px``.
    """
    dx, dy = path.project((state.px, state.py))
    heading = float(path.heading_at(state.px))
    return (
        params.w_acc * control.a ** 2
        + params.w_yawrate * control.theta_dot ** 2
        + params.w_vel * (state.v - params.reference_speed) ** 2
        + params.w_path_lat * (state.py - dy) ** 2
        + params.w_path_long * (state.px - dx) ** 2
        + params.w_heading * (state.theta - heading) ** 2
    )


def terminal_cost(state: VehicleState, params: CostParams, path: DesiredPath) -> float:
    """State terms of :func:`stage_cost` scaled by ``terminal_scale``."""
    return float(stage_costs(state.as_array()[None, :], np.zeros((0, CONTROL_DIM)), params, path)[0])


def trajectory_cost(
    states: np.ndarray,
    controls: np.ndarray,
    params: CostParams,
    path: DesiredPath,
    reference: Optional[PathReference] = None,
) -> float:
    return float(np.sum(stage_costs(states, controls, params, path, reference)))


def quadratize_cost(
    trajectory: Trajectory,
    params: CostParams,
    path: DesiredPath,
    reference: Optional[PathReference] = None,
) -> QuadraticCost:
    """
    Second-order expansion of the cost about ``trajectory``.

    The closest path point and the path heading of each stage are frozen
    at the expansion point (or taken from ``reference``), so the model is
    exact as long as neither moves.
    """
    states = trajectory.states
    controls = trajectory.controls
    n = controls.shape[0]
    if reference is None:
        reference = path.reference(states[:, :2])
    weights = _state_weights(params)
    scales = np.ones(n + 1)
    scales[-1] = params.terminal_scale

    Q = np.zeros((n + 1, STATE_DIM, STATE_DIM))
    Q[:, np.arange(STATE_DIM), np.arange(STATE_DIM)] = 2.0 * scales[:, None] * weights
    q = 2.0 * scales[:, None] * weights * _state_errors(states, reference, params)

    control_weights = np.array([params.w_acc, params.w_yawrate])
    R = np.zeros((n, CONTROL_DIM, CONTROL_DIM))
    R[:, np.arange(CONTROL_DIM), np.arange(CONTROL_DIM)] = 2.0 * control_weights
    r = 2.0 * control_weights * controls
    return QuadraticCost(Q, q, R, r, stage_costs(states, controls, params, path, reference))
