"""
Constrained iterative LQR over the barrier-augmented lane-change cost.

Each iteration linearizes the Euler dynamics, quadratizes cost and barriers
about the current trajectory, runs a regularized Riccati backward pass and
rolls the resulting policy through the nonlinear model with a backtracking
line search.

The closest path points, the path headings and the speeds that set the
yaw-rate bounds are taken from the initial rollout of a solve and held
fixed until it returns, so every iteration descends on the same objective.
"""
import logging
import time
from dataclasses import dataclass, field
from operator import mul
from typing import Optional, Sequence, Tuple

import numpy as np

from .constraints import (
    BarrierParams,
    ObstacleEllipse,
    SafetyConfig,
    barrier_weights,
    control_residuals,
    ellipse_arrays,
    safety_residuals,
)
from .errors import DivergenceError, NotPositiveDefiniteError, ValidationError
from .objective import CostParams, DesiredPath, PathReference, quadratize_cost, trajectory_cost
from .vehicle_model import (
    CONTROL_DIM,
    STATE_DIM,
    EgoParams,
    Trajectory,
    VehicleState,
    _euler,
    clamp_control,
    linearize_trajectory,
    normalize_angle,
)

logger = logging.getLogger(__name__)

# Lowest positive regularization tried when reg_min is zero.
_REG_FLOOR = 1e-9


def _default_alphas() -> Tuple[float, ...]:
    return tuple(0.5 ** k for k in range(11))


@dataclass(frozen=True)
class SolverConfig:
    """
    Iteration limits and regularization schedule of the solver.

    Attributes
    ----------
    horizon : int
        Number of control stages ``N``.
    dt : float
        Stage length (s).
    max_iterations : int
        Upper bound on backward/forward iterations.
    cost_tolerance : float
        Stop once an accepted step lowers the cost by less than this.
    reg_init, reg_min, reg_max, reg_factor : float
        Levenberg-Marquardt style schedule for the ``Q_uu`` shift.
    line_search_alphas : tuple of float
        Strictly decreasing step scales starting at 1.
    """
    horizon: int = 40
    dt: float = 0.1
    max_iterations: int = 100
    cost_tolerance: float = 1e-3
    reg_init: float = 1e-6
    reg_min: float = 1e-8
    reg_max: float = 1e6
    reg_factor: float = 10.0
    line_search_alphas: Tuple[float, ...] = field(default_factory=_default_alphas)

    def __post_init__(self):
        object.__setattr__(self, "line_search_alphas", tuple(float(a) for a in self.line_search_alphas))
        if self.horizon < 1:
            raise ValidationError(f"SolverConfig.horizon must be at least 1, got {self.horizon}")
        if not self.dt > 0.0:
            raise ValidationError(f"SolverConfig.dt must be positive, got {self.dt}")
        if self.max_iterations < 1:
            raise ValidationError(f"SolverConfig.max_iterations must be at least 1, got {self.max_iterations}")
        if not 0.0 <= self.reg_min <= self.reg_init <= self.reg_max:
            raise ValidationError("SolverConfig needs 0 <= reg_min <= reg_init <= reg_max")
        if self.reg_factor <= 1.0:
            raise ValidationError(f"SolverConfig.reg_factor must exceed 1, got {self.reg_factor}")
        alphas = self.line_search_alphas
        if not alphas or alphas[0] != 1.0 or any(b >= a for a, b in zip(alphas, alphas[1:])) or alphas[-1] <= 0.0:
            raise ValidationError("line_search_alphas must start at 1 and decrease strictly within (0, 1]")


@dataclass(frozen=True)
class BarrierSet:
    """Barrier parameters for the safety residuals and, optionally, the control bounds."""
    safety: BarrierParams = field(default_factory=lambda: BarrierParams(3.0, 10.0))
    control: Optional[BarrierParams] = field(default_factory=lambda: BarrierParams(1.0, 10.0))


@dataclass(frozen=True, eq=False)
class PlanResult:
    """
    Outcome of one solve.

    ``max_constraint_violation`` is the most negative raw residual over all
    stages and constraints of the returned trajectory, or 0 if none is
    violated.
    """
    trajectory: Trajectory
    converged: bool
    iterations: int
    final_cost: float
    max_constraint_violation: float
    solve_time_ms: float


@dataclass(frozen=True, eq=False)
class StageReference:
    """
    Terms of the objective that are held fixed during one solve.

    Attributes
    ----------
    path : PathReference
        Closest path point and path heading of each of the ``N + 1`` stages.
    speeds : numpy.ndarray
        Speeds that set the yaw-rate bounds of the ``N`` control stages.
    """
    path: PathReference
    speeds: np.ndarray


@dataclass(frozen=True, eq=False)
class StageModel:
    """
    Barrier-augmented quadratic model of every stage.

    ``lx`` and ``lxx`` have ``N + 1`` rows, the terminal stage last; the
    control blocks ``lu``, ``luu`` and ``lux`` have ``N``.
    """
    lx: np.ndarray
    lu: np.ndarray
    lxx: np.ndarray
    luu: np.ndarray
    lux: np.ndarray


@dataclass(frozen=True, eq=False)
class Gains:
    k: np.ndarray
    K: np.ndarray
    expected_reduction: float


class PlanningProblem:
    """
    One instance of the constrained optimal-control problem.

    Holds the initial state, the stage-indexed obstacles and all cost and
    constraint parameters, and evaluates the barrier-augmented objective.

    Parameters
    ----------
    x0 : VehicleState
        Initial ego state.
    ellipses : tuple of numpy.ndarray
        Stage-indexed obstacle arrays ``(centers, yaws, half_long, half_short)``
        with ``N + 1`` rows each, as built by
        :func:`lanesmith.constraints.ellipse_arrays`.
    cost : CostParams
        Cost weights; ``v_ref=None`` falls back to ``x0.v``.
    path : DesiredPath
        Path tracked by the cost.
    ego : EgoParams
        Ego geometry and limits.
    safety : SafetyConfig
        Margin added to the ellipse axes.
    barriers : BarrierSet
        Barrier parameters.
    dt : float
        Stage length (s).
    """

    def __init__(
        self,
        x0: VehicleState,
        ellipses: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
        cost: CostParams,
        path: DesiredPath,
        ego: EgoParams,
        safety: SafetyConfig,
        barriers: BarrierSet,
        dt: float,
    ):
        self.x0 = x0
        self.centers, self.yaws, self.half_long, self.half_short = (np.asarray(e, dtype=float) for e in ellipses)
        self.horizon = self.yaws.shape[0] - 1
        if self.horizon < 1:
            raise ValidationError("obstacle arrays must hold N + 1 stages with N >= 1")
        self.cost = cost if cost.v_ref is not None else cost.with_reference_speed(x0.v)
        self.path = path
        self.ego = ego
        self.safety = safety
        self.barriers = barriers
        self.dt = dt

    @classmethod
    def from_obstacles(
        cls,
        x0: VehicleState,
        obstacles_per_stage: Sequence[Sequence[ObstacleEllipse]],
        cost: CostParams,
        path: DesiredPath,
        ego: EgoParams,
        safety: SafetyConfig,
        barriers: BarrierSet,
        dt: float,
    ) -> "PlanningProblem":
        """Build a problem from ``N + 1`` lists of ellipses of equal length."""
        return cls(x0, ellipse_arrays(obstacles_per_stage), cost, path, ego, safety, barriers, dt)

    @property
    def obstacle_count(self) -> int:
        return self.centers.shape[1]

    def safety_residuals(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return safety_residuals(
            states, self.centers, self.yaws, self.half_long, self.half_short, self.ego, self.safety.s_min
        )

    def reference(self, trajectory: Trajectory) -> StageReference:
        """Path references and yaw-bound speeds of ``trajectory`` itself."""
        states = trajectory.states
        return StageReference(self.path.reference(states[:, :2]), states[:-1, 2].copy())

    def total_cost(
        self, states: np.ndarray, controls: np.ndarray, reference: Optional[StageReference] = None
    ) -> float:
        """
        Tracking cost plus every barrier term.

        Without ``reference`` the path references and yaw-bound speeds are
        those of ``states``.
        """
        path_reference = speeds = None
        if reference is not None:
            path_reference, speeds = reference.path, reference.speeds
        total = trajectory_cost(states, controls, self.cost, self.path, path_reference)
        if self.obstacle_count:
            values, _ = self.safety_residuals(states)
            total += float(np.sum(barrier_weights(values, self.barriers.safety)[0]))
        if self.barriers.control is not None:
            values, _ = control_residuals(states[:-1], controls, self.ego, speeds)
            total += float(np.sum(barrier_weights(values, self.barriers.control)[0]))
        return total

    def stage_model(self, trajectory: Trajectory, reference: Optional[StageReference] = None) -> StageModel:
        """
        Quadratize cost and barriers about ``trajectory``.

        The path references and yaw-bound speeds come from ``reference``,
        or from ``trajectory`` when it is omitted; either way they are
        constants of the model.
        """
        if reference is None:
            reference = self.reference(trajectory)
        quad = quadratize_cost(trajectory, self.cost, self.path, reference.path)
        n = trajectory.horizon
        lx = quad.q.copy()
        lxx = quad.Q.copy()
        lu = quad.r.copy()
        luu = quad.R.copy()
        lux = np.zeros((n, CONTROL_DIM, STATE_DIM))

        if self.obstacle_count:
            values, grads = self.safety_residuals(trajectory.states)
            _, d1, d2 = barrier_weights(values, self.barriers.safety)
            lx += np.einsum("mkc,mkcs->ms", d1, grads)
            lxx += np.einsum("mkc,mkcs,mkct->mst", d2, grads, grads)

        if self.barriers.control is not None:
            values, grads = control_residuals(trajectory.states[:-1], trajectory.controls, self.ego, reference.speeds)
            _, d1, d2 = barrier_weights(values, self.barriers.control)
            gradient = d1 @ grads
            hessian = np.einsum("nj,js,jt->nst", d2, grads, grads)
            lx[:-1] += gradient[:, :STATE_DIM]
            lu += gradient[:, STATE_DIM:]
            lxx[:-1] += hessian[:, :STATE_DIM, :STATE_DIM]
            luu += hessian[:, STATE_DIM:, STATE_DIM:]
            lux += hessian[:, STATE_DIM:, :STATE_DIM]
        return StageModel(lx, lu, lxx, luu, lux)

    def max_violation(self, trajectory: Trajectory) -> float:
        """Most negative raw safety or control-bound residual, capped at 0."""
        worst = 0.0
        if self.obstacle_count:
            values, _ = self.safety_residuals(trajectory.states)
            worst = min(worst, float(np.min(values)))
        values, _ = control_residuals(trajectory.states[:-1], trajectory.controls, self.ego)
        return min(worst, float(np.min(values)))


def backward_pass(trajectory: Trajectory, model: StageModel, regularization: float) -> Gains:
    """
    Riccati recursion from stage ``N`` down to 0.

    Each stage works on the joint quadratic form of ``(du, dx, 1)``, so one
    linear solve per stage gives both gains and the value function carries
    the expected reduction in its constant entry.

    Parameters
    ----------
    trajectory : Trajectory
        Nominal trajectory the model was built around.
    model : StageModel
        Barrier-augmented quadratic stage models.
    regularization : float
        Shift added to the diagonal of every ``Q_uu``.

    Returns
    -------
    Gains
        Feedforward ``k`` of shape ``(N, 2)``, feedback ``K`` of shape
        ``(N, 2, 4)`` and the expected cost reduction of a full step.

    Raises
    ------
    NotPositiveDefiniteError
        If a regularized ``Q_uu`` cannot be Cholesky-factorized.
    """
    n = trajectory.horizon
    A, B = linearize_trajectory(trajectory.states[:-1], trajectory.dt)
    u = slice(0, CONTROL_DIM)
    x = slice(CONTROL_DIM, CONTROL_DIM + STATE_DIM)
    rest = slice(CONTROL_DIM, None)
    size = CONTROL_DIM + STATE_DIM + 1

    # (du, dx, 1) -> (dx_next, 1)
    transition = np.zeros((n, STATE_DIM + 1, size))
    transition[:, :STATE_DIM, u] = B
    transition[:, :STATE_DIM, x] = A
    transition[:, -1, -1] = 1.0

    stage = np.zeros((n, size, size))
    stage[:, u, u] = model.luu
    stage[:, u, x] = model.lux
    stage[:, x, u] = np.swapaxes(model.lux, 1, 2)
    stage[:, x, x] = model.lxx[:-1]
    stage[:, u, -1] = stage[:, -1, u] = model.lu
    stage[:, x, -1] = stage[:, -1, x] = model.lx[:-1]

    value = np.zeros((STATE_DIM + 1, STATE_DIM + 1))
    value[:STATE_DIM, :STATE_DIM] = model.lxx[n]
    value[:STATE_DIM, -1] = value[-1, :STATE_DIM] = model.lx[n]

    shift = regularization * np.eye(CONTROL_DIM)
    gains = np.zeros((n, CONTROL_DIM, STATE_DIM + 1))
    for i in reversed(range(n)):
        H = stage[i] + transition[i].T @ value @ transition[i]
        Quu = H[u, u]
        Qu_rest = H[u, rest]
        Quu_reg = Quu + shift
        if not np.all(np.isfinite(Quu_reg)):
            raise NotPositiveDefiniteError(i, regularization)
        try:
            np.linalg.cholesky(Quu_reg)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(i, regularization)
        G = -np.linalg.solve(Quu_reg, Qu_rest)
        gains[i] = G
        T = G.T @ (0.5 * Quu @ G + Qu_rest)
        value = H[rest, rest] + T + T.T
    return Gains(gains[:, :, -1], gains[:, :, :-1], -0.5 * value[-1, -1])


def forward_pass(
    problem: PlanningProblem,
    trajectory: Trajectory,
    gains: Gains,
    alpha: float,
    reference: Optional[StageReference] = None,
) -> Tuple[Trajectory, float]:
    """
    Roll ``u = u_hat + alpha k + K (x - x_hat)`` through the nonlinear model.

    Controls are clamped to the mechanical bounds before each step, so the
    candidate is always physically executable.

    Parameters
    ----------
    reference : StageReference, optional
        Held-fixed objective terms the candidate cost is evaluated with;
        by default those of the candidate itself.

    Returns
    -------
    tuple
        The candidate trajectory and its barrier-augmented cost.
    """
    dt = trajectory.dt
    ego = problem.ego
    feedforward = (trajectory.controls + alpha * gains.k).tolist()
    feedback = gains.K.tolist()

    x0 = problem.x0
    px, py, v, theta = x0.px, x0.py, x0.v, x0.theta
    states = [(px, py, v, theta)]
    controls = []
    for (a_ff, rate_ff), (a_gain, rate_gain), (npx, npy, nv, ntheta) in zip(
        feedforward, feedback, trajectory.states.tolist()
    ):
        dx = (px - npx, py - npy, v - nv, normalize_angle(theta - ntheta))
        a, theta_dot = clamp_control(
            a_ff + sum(map(mul, a_gain, dx)), rate_ff + sum(map(mul, rate_gain, dx)), v, ego, dt
        )
        controls.append((a, theta_dot))
        px, py, v, theta = _euler(px, py, v, theta, a, theta_dot, dt)
        states.append((px, py, v, theta))
    states = np.array(states)
    controls = np.array(controls).reshape(-1, CONTROL_DIM)
    return Trajectory(states, controls, dt), problem.total_cost(states, controls, reference)


class CILQRSolver:
    """
    Receding-horizon CILQR solver.

    A solver instance keeps no state between solves beyond its config, so
    one instance can serve many problems in sequence.

    Parameters
    ----------
    config : SolverConfig, optional
        Iteration limits and regularization schedule.
    """

    def __init__(self, config: Optional[SolverConfig] = None):
        self.config = config or SolverConfig()

    def _increase(self, reg: float) -> float:
        if reg >= self.config.reg_max:
            raise DivergenceError(
                f"no descent step found at maximum regularization {self.config.reg_max:g}"
            )
        return min(max(reg * self.config.reg_factor, self.config.reg_min, _REG_FLOOR), self.config.reg_max)

    def _initial_controls(self, warm_start) -> np.ndarray:
        n = self.config.horizon
        if warm_start is None:
            return np.zeros((n, CONTROL_DIM))
        controls = np.asarray(warm_start, dtype=float).reshape(-1, CONTROL_DIM)
        if controls.shape[0] != n:
            raise ValidationError(f"warm start needs {n} controls, got {controls.shape[0]}")
        return controls

    def solve(self, problem: PlanningProblem, warm_start: Optional[np.ndarray] = None) -> PlanResult:
        """
        Solve ``problem`` starting from ``warm_start`` or from zero controls.

        The reported ``final_cost`` is evaluated with the path references and
        yaw-bound speeds of the initial rollout, like every cost compared
        during the solve.

        Raises
        ------
        DivergenceError
            If no line-search step lowers the cost at maximum regularization.
        ValidationError
            If the problem horizon or the warm start length disagree with the config.
        """
        cfg = self.config
        started = time.perf_counter()
        if problem.horizon != cfg.horizon:
            raise ValidationError(f"problem has horizon {problem.horizon}, solver expects {cfg.horizon}")

        n = cfg.horizon
        seed = Trajectory(np.tile(problem.x0.as_array(), (n + 1, 1)), self._initial_controls(warm_start), cfg.dt)
        idle = Gains(np.zeros((n, CONTROL_DIM)), np.zeros((n, CONTROL_DIM, STATE_DIM)), 0.0)
        trajectory, cost = forward_pass(problem, seed, idle, 1.0)
        reference = problem.reference(trajectory)

        reg = cfg.reg_init
        converged = False
        iterations = 0
        model = None
        for iterations in range(1, cfg.max_iterations + 1):
            if model is None:
                model = problem.stage_model(trajectory, reference)
            try:
                gains = backward_pass(trajectory, model, reg)
            except NotPositiveDefiniteError as exc:
                logger.debug("iteration %d: %s", iterations, exc)
                reg = self._increase(reg)
                continue

            if gains.expected_reduction < cfg.cost_tolerance:
                converged = True
                break

            candidate = None
            for alpha in cfg.line_search_alphas:
                trial, trial_cost = forward_pass(problem, trajectory, gains, alpha, reference)
                if trial_cost < cost:
                    candidate = (trial, trial_cost, alpha)
                    break
            if candidate is None:
                logger.debug("iteration %d: line search failed at reg %.1e", iterations, reg)
                reg = self._increase(reg)
                continue

            trial, trial_cost, alpha = candidate
            improvement = cost - trial_cost
            trajectory, cost = trial, trial_cost
            model = None
            reg = max(reg / cfg.reg_factor, cfg.reg_min)
            logger.debug("iteration %d: cost %.6g alpha %g reg %.1e", iterations, cost, alpha, reg)
            if improvement < cfg.cost_tolerance:
                converged = True
                break

        elapsed_ms = (time.perf_counter() - started) * 1e3
        return PlanResult(
            trajectory=trajectory,
            converged=converged,
            iterations=iterations,
            final_cost=cost,
            max_constraint_violation=problem.max_violation(trajectory),
            solve_time_ms=elapsed_ms,
        )


def solve(
    x0: VehicleState,
    obstacles_per_stage: Sequence[Sequence[ObstacleEllipse]],
    cost: CostParams,
    path: DesiredPath,
    ego: EgoParams,
    safety: SafetyConfig,
    barriers: BarrierSet,
    cfg: SolverConfig,
    warm_start: Optional[np.ndarray] = None,
) -> PlanResult:
    """
    Solve the barrier-augmented lane-change problem once.

    Parameters
    ----------
    x0 : VehicleState
        Initial ego state.
    obstacles_per_stage : sequence of sequence of ObstacleEllipse
        ``N + 1`` stage-indexed obstacle lists.
    cost, path, ego, safety, barriers
        Problem definition, see :class:`PlanningProblem`.
    cfg : SolverConfig
        Solver settings; ``cfg.horizon`` must equal ``N``.
    warm_start : numpy.ndarray, optional
        Initial controls of shape ``(N, 2)``.

    Returns
    -------
    PlanResult
        The locally optimal trajectory and convergence diagnostics.
    """
    problem = PlanningProblem.from_obstacles(x0, obstacles_per_stage, cost, path, ego, safety, barriers, cfg.dt)
    return CILQRSolver(cfg).solve(problem, warm_start)
