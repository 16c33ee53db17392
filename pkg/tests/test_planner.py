import math
import unittest

import numpy as np
import numpy.testing as npt
import pytest

from lanesmith.constraints import SafetyConfig
from lanesmith.errors import ValidationError
from lanesmith.objective import CostParams
from lanesmith.planner import (
    CompletionParams,
    LaneGeometry,
    Mode,
    PlannerConfig,
    PlannerState,
    SurroundingVehicle,
    backup_command,
    build_ladder,
    check_safety,
    detect_completion,
    filter_adjacent,
    plan_step,
    predict,
    predict_all,
)
from lanesmith.solver import CILQRSolver, PlanningProblem
from lanesmith.traffic import build_scenario, world_step
from lanesmith.vehicle_model import ControlInput, EgoParams, VehicleState, rollout, yaw_rate_bounds


def _vehicle(k, px, py, v=2.0):
    return SurroundingVehicle(k, VehicleState(px, py, v, 0.0))


def _oracle_violations(traj, vehicles, ego, s_min):
    """Direct evaluation of the circle-in-ellipse and control-bound tests."""
    found = set()
    for i, x in enumerate(traj.states):
        rear = np.array([x[0], x[1]])
        front = rear + ego.wheelbase * np.array([math.cos(x[3]), math.sin(x[3])])
        for vehicle in vehicles:
            s = vehicle.state
            cx = s.px + i * traj.dt * s.v * math.cos(s.theta)
            cy = s.py + i * traj.dt * s.v * math.sin(s.theta)
            a = vehicle.ellipse_a_at(s.v) + ego.circle_radius + s_min
            b = vehicle.ellipse_b + ego.circle_radius + s_min
            for name, circle in (("front", front), ("rear", rear)):
                dx, dy = circle[0] - cx, circle[1] - cy
                lx = math.cos(s.theta) * dx + math.sin(s.theta) * dy
                ly = -math.sin(s.theta) * dx + math.cos(s.theta) * dy
                if (lx / a) ** 2 + (ly / b) ** 2 - 1.0 < 0.0:
                    found.add((i, vehicle.id, name))
    for i, u in enumerate(traj.controls):
        v = traj.states[i, 2]
        low = v * math.tan(ego.delta_min) / ego.wheelbase
        high = v * math.tan(ego.delta_max) / ego.wheelbase
        for name, value in (("a_min", u[0] - ego.a_min), ("a_max", ego.a_max - u[0]),
                            ("yaw_rate_min", u[1] - low), ("yaw_rate_max", high - u[1])):
            if value < 0.0:
                found.add((i, None, name))
    return found


class TestSurroundingVehicle(unittest.TestCase):
    def test_axes_follow_size_and_speed(self):
        vehicle = _vehicle(0, 0.0, 0.0, v=5.0)
        self.assertAlmostEqual(vehicle.ellipse_a, 2.25 + 1.0)
        self.assertEqual(vehicle.ellipse_b, 0.9)
        self.assertGreaterEqual(vehicle.ellipse_a, vehicle.length / 2)
        self.assertAlmostEqual(vehicle.disc_radius, 1.1)

    def test_reaction_gap(self):
        self.assertEqual(_vehicle(0, 0, 0, v=1.0).reaction_gap, 4.5 + 2.0)
        self.assertEqual(_vehicle(0, 0, 0, v=5.0).reaction_gap, 4.5 + 5.0)

    def test_invalid_size(self):
        with self.assertRaises(ValidationError):
            SurroundingVehicle(0, VehicleState(0, 0, 0, 0), length=0.0)

    def test_lane_geometry(self):
        lanes = LaneGeometry()
        self.assertEqual(lanes.toward_original, 1.0)
        self.assertTrue(lanes.in_target_lane(0.5, 0.9))
        self.assertFalse(lanes.in_target_lane(1.0, 0.9))
        with self.assertRaises(ValidationError):
            LaneGeometry(3.0, 0.0, 3.5)


class TestFilterAndPredict(unittest.TestCase):
    def test_empty_input(self):
        self.assertEqual(filter_adjacent([], VehicleState(0, 0, 1, 0), 30.0), [])

    def test_boundary_is_retained(self):
        ego = VehicleState(0, 0, 1, 0)
        vehicles = [_vehicle(0, 30.0, 0.0), _vehicle(1, -30.0000001, 0.0), _vehicle(2, -30.0, 3.5)]
        self.assertEqual([v.id for v in filter_adjacent(vehicles, ego, 30.0)], [0, 2])

    def test_window_must_be_positive(self):
        with self.assertRaises(ValidationError):
            filter_adjacent([], VehicleState(0, 0, 1, 0), 0.0)

    def test_scenario_layout_is_fully_retained(self):
        world = build_scenario(2.0, 8.0)
        kept = filter_adjacent(list(world.vehicles), world.ego, 30.0)
        self.assertEqual([v.id for v in kept], list(range(8)))

    def test_static_vehicle(self):
        states = predict(_vehicle(0, 3.0, 1.0, v=0.0), 40, 0.1)
        self.assertEqual(len(states), 41)
        self.assertTrue(all(s == states[0] for s in states))

    def test_constant_velocity_displacement(self):
        states = predict(_vehicle(0, 3.0, 1.0, v=2.0), 40, 0.1)
        self.assertAlmostEqual(states[-1].px - states[0].px, 8.0)
        self.assertTrue(all(s.v == 2.0 and s.theta == 0.0 and s.py == 1.0 for s in states))

    def test_reversed_heading(self):
        vehicle = SurroundingVehicle(0, VehicleState(0.0, 0.0, 1.0, math.pi))
        xs = [s.px for s in predict(vehicle, 10, 0.1)]
        self.assertTrue(all(b < a for a, b in zip(xs, xs[1:])))

    def test_prediction_set(self):
        vehicles = [_vehicle(3, 5.0, 0.0), _vehicle(7, -5.0, 3.5, v=1.0)]
        predictions = predict_all(vehicles, 10, 0.1)
        self.assertEqual(predictions.horizon, 10)
        self.assertEqual(predictions.states.shape, (2, 11, 4))
        self.assertEqual(predictions.sequence(7)[-1].px, predict(vehicles[1], 10, 0.1)[-1].px)
        self.assertEqual(len(predictions.obstacles()), 11)
        with self.assertRaises(KeyError):
            predictions.sequence(4)


class TestCheckSafety(unittest.TestCase):
    def setUp(self):
        self.ego = EgoParams()
        self.safety = SafetyConfig(0.1)

    def test_free_road_interior_controls(self):
        traj = rollout(VehicleState(0, 0, 2, 0), [ControlInput(0.1, 0.0)] * 10, 0.1)
        verdict = check_safety(traj, predict_all([], 10, 0.1), self.ego, self.safety)
        self.assertTrue(verdict.safe)
        self.assertEqual(verdict.violations, ())

    def test_passing_through_obstacle_center(self):
        traj = rollout(VehicleState(0, 0, 2, 0), [ControlInput(0.0, 0.0)] * 10, 0.1)
        obstacle = _vehicle(4, 1.0, 0.0, v=0.0)
        verdict = check_safety(traj, predict_all([obstacle], 10, 0.1), self.ego, self.safety)
        self.assertFalse(verdict.safe)
        at_center = [v for v in verdict.violations if v.stage == 5 and v.constraint == "rear"]
        self.assertEqual(len(at_center), 1)
        self.assertEqual(at_center[0].vehicle_id, 4)
        self.assertAlmostEqual(at_center[0].residual, -1.0)
        self.assertEqual([v.stage for v in verdict.violations], sorted(v.stage for v in verdict.violations))

    def test_horizon_mismatch(self):
        traj = rollout(VehicleState(0, 0, 2, 0), [ControlInput(0.0, 0.0)] * 10, 0.1)
        with self.assertRaises(ValidationError):
            check_safety(traj, predict_all([], 12, 0.1), self.ego, self.safety)

    def test_agrees_with_direct_evaluation(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            x0 = VehicleState(0.0, rng.uniform(-1, 4.5), rng.uniform(0, 5), rng.uniform(-0.3, 0.3))
            controls = [ControlInput(*u) for u in rng.uniform([-5, -0.6], [3, 0.6], size=(10, 2))]
            traj = rollout(x0, controls, 0.1)
            vehicles = [
                SurroundingVehicle(k, VehicleState(rng.uniform(-10, 15), rng.choice([0.0, 3.5]), rng.uniform(0, 5),
                                                   rng.uniform(-0.2, 0.2)))
                for k in range(3)
            ]
            verdict = check_safety(traj, predict_all(vehicles, 10, 0.1), self.ego, self.safety)
            found = {(v.stage, v.vehicle_id, v.constraint) for v in verdict.violations}
            expected = _oracle_violations(traj, vehicles, self.ego, self.safety.s_min)
            self.assertEqual(found, expected)
            self.assertEqual(verdict.safe, not expected)


class TestBackupCommand(unittest.TestCase):
    def setUp(self):
        self.ego = EgoParams()

    def test_stopped_and_straight(self):
        controls = backup_command(VehicleState(0, 3.5, 0.0, 0.0), self.ego, 3, 0.1)
        self.assertEqual(controls, [ControlInput(0.0, 0.0)] * 3)

    def test_braking_saturates(self):
        self.assertEqual(backup_command(VehicleState(0, 3.5, 1.0, 0.0), self.ego, 1, 0.1)[0].a, -4.0)

    def test_exact_stop(self):
        controls = backup_command(VehicleState(0, 3.5, 0.2, 0.0), self.ego, 2, 0.1)
        self.assertAlmostEqual(controls[0].a, -2.0)
        self.assertEqual(controls[1].a, 0.0)

    def test_lateral_drift_is_small(self):
        start = VehicleState(0, 3.5, 5.0, 0.05)
        controls = backup_command(start, self.ego, 5, 0.1)
        traj = rollout(start, controls, 0.1)
        self.assertLessEqual(abs(traj.states[-1, 1] - start.py), 0.05)
        for i, c in enumerate(controls):
            low, high = yaw_rate_bounds(max(traj.states[i, 2], 0.0), self.ego)
            self.assertTrue(low <= c.theta_dot <= high)
            self.assertGreaterEqual(c.a, self.ego.a_min)


class TestDetectCompletion(unittest.TestCase):
    def test_held_for_ten_steps(self):
        history = [VehicleState(i, 0.0, 2.0, 0.0) for i in range(9)]
        self.assertTrue(detect_completion(VehicleState(9, 0.0, 2.0, 0.0), 0.0, history))

    def test_too_short(self):
        history = [VehicleState(i, 0.0, 2.0, 0.0) for i in range(8)]
        self.assertFalse(detect_completion(VehicleState(9, 0.0, 2.0, 0.0), 0.0, history))

    def test_excursion_resets(self):
        history = [VehicleState(i, 0.0, 2.0, 0.0) for i in range(9)] + [VehicleState(9, 0.5, 2.0, 0.0)]
        self.assertFalse(detect_completion(VehicleState(10, 0.0, 2.0, 0.0), 0.0, history))

    def test_yaw_tolerance(self):
        history = [VehicleState(i, 0.1, 2.0, 0.0) for i in range(9)]
        self.assertFalse(detect_completion(VehicleState(9, 0.1, 2.0, 0.06), 0.0, history))
        self.assertTrue(detect_completion(VehicleState(9, 0.1, 2.0, 0.06), 0.0, history, CompletionParams(yaw_tolerance=0.1)))


class TestLadder(unittest.TestCase):
    def test_default_ladder(self):
        ladder = build_ladder(LaneGeometry(), PlannerConfig(), False)
        self.assertEqual([r.name for r in ladder], ["target_offset", "target_center", "attempt", "abort"])
        npt.assert_allclose([r.lateral for r in ladder], [0.3, 0.0, 2.3, 3.5])
        self.assertEqual(ladder[-1].mode, Mode.ABORTING)

    def test_disabled_ladder(self):
        ladder = build_ladder(LaneGeometry(), PlannerConfig(use_fallback_ladder=False, path_offset=0.5), False)
        self.assertEqual(len(ladder), 1)
        self.assertEqual(ladder[0].lateral, 0.5)

    def test_after_lane_change(self):
        ladder = build_ladder(LaneGeometry(), PlannerConfig(), True)
        self.assertEqual([(r.name, r.mode) for r in ladder], [("target_center", Mode.COMPLETED)])

    def test_config_invariants(self):
        with self.assertRaises(ValidationError):
            PlannerConfig(replan_stride=40)
        with self.assertRaises(ValidationError):
            PlannerConfig(replan_stride=0)


class TestPlanStep(unittest.TestCase):
    def test_free_road_steady_state(self):
        config = PlannerConfig(path_offset=0.0)
        for v in (0.5, 1.0, 2.0, 5.0):
            with self.subTest(v=v):
                state = PlannerState.initial(config)
                plan = plan_step(VehicleState(0.0, 0.0, v, 0.0), [], state, config, LaneGeometry())
                self.assertEqual(plan.mode, Mode.ATTEMPTING)
                self.assertEqual(plan.rung, 0)
                self.assertEqual(len(plan.controls), 1)
                self.assertLess(abs(plan.controls[0].a), 1e-3)
                self.assertLess(abs(plan.controls[0].theta_dot), 1e-3)
                self.assertEqual(state.previous_solution.shape, (40, 2))
                self.assertEqual(state.active_rung, "target_offset")
                self.assertEqual(state.active_lateral, 0.0)
                self.assertEqual(state.anchor, (0.0, 0.0))

    def test_desired_path_ramps_from_the_first_position(self):
        config = PlannerConfig()
        state = PlannerState.initial(config)
        plan_step(VehicleState(2.0, 3.5, 2.0, 0.0), [], state, config, LaneGeometry())
        plan_step(VehicleState(2.5, 3.4, 2.0, -0.05), [], state, config, LaneGeometry())
        self.assertEqual(state.anchor, (2.0, 3.5))
        path = state.active_path
        npt.assert_allclose(path.project((1.0, 3.0)), (1.0, 3.5))
        self.assertAlmostEqual(path.project((20.0, 1.0))[1], 0.3)
        self.assertLess(float(path.heading_at(6.0)), 0.0)

    def test_emits_lambda_controls(self):
        config = PlannerConfig(replan_stride=3)
        state = PlannerState.initial(config)
        plan = plan_step(VehicleState(0.0, 3.5, 2.0, 0.0), [], state, config, LaneGeometry())
        self.assertEqual(len(plan.controls), 3)
        npt.assert_array_equal(state.previous_solution[-3:], 0.0)

    def test_invalid_stride_in_state(self):
        config = PlannerConfig()
        state = PlannerState(lam=40)
        with self.assertRaises(ValidationError):
            plan_step(VehicleState(0.0, 3.5, 2.0, 0.0), [], state, config, LaneGeometry())

    def test_abort_path_returns_to_original_lane(self):
        config = PlannerConfig()
        lanes = LaneGeometry()
        abort = build_ladder(lanes, config, False)[-1]
        ego = VehicleState(0.0, 3.0, 2.0, 0.0)
        empty = predict_all([], config.solver.horizon, config.solver.dt).ellipse_arrays()
        problem = PlanningProblem(ego, empty, config.cost, abort.path(ego), config.ego, config.safety,
                                  config.barriers, config.solver.dt)
        result = CILQRSolver(config.solver).solve(problem)
        self.assertLessEqual(abs(result.trajectory.states[-1, 1] - lanes.original_y), 0.3)

    def test_blocked_gap_falls_back_to_braking(self):
        config = PlannerConfig()
        ego = VehicleState(0.0, 3.5, 2.0, 0.0)
        vehicles = [_vehicle(0, 6.8, 3.5, v=0.0)] + [_vehicle(k, px, 0.0) for k, px in
                                                     ((4, 9.0), (5, 4.0), (6, -1.0), (7, -6.0))]
        state = PlannerState.initial(config)
        plan = plan_step(ego, vehicles, state, config, LaneGeometry())
        self.assertEqual(plan.mode, Mode.BACKUP)
        self.assertEqual(plan.rung, -1)
        self.assertFalse(plan.verdict.safe)
        self.assertIs(plan.problem.x0, ego)
        self.assertEqual(plan.controls[0].a, -4.0)
        self.assertIsNone(state.previous_solution)
        self.assertEqual(state.mode, Mode.BACKUP)

    def test_same_snapshot_same_rung(self):
        config = PlannerConfig(cost=CostParams(v_ref=2.0))
        world = build_scenario(2.0, 10.0)
        plans = [
            plan_step(world.ego, world.vehicles, PlannerState.initial(config), config, world.lanes) for _ in range(2)
        ]
        self.assertEqual(plans[0].rung, plans[1].rung)
        self.assertEqual(plans[0].controls, plans[1].controls)

    def test_starts_moving_toward_the_target_lane(self):
        config = PlannerConfig(cost=CostParams(v_ref=2.0))
        world = build_scenario(2.0, 10.0)
        state = PlannerState.initial(config)
        solver = CILQRSolver(config.solver)
        lateral = []
        for i in range(10):
            plan = plan_step(world.ego, world.vehicles, state, config, world.lanes, solver)
            if i == 0:
                self.assertEqual(plan.mode, Mode.ATTEMPTING)
                self.assertLess(plan.controls[0].theta_dot, 0.0)
            lateral.append(world.ego.py)
            world, _ = world_step(world, plan.controls[0])
        lateral.append(world.ego.py)
        self.assertEqual(lateral[0], 3.5)
        self.assertTrue(all(b <= a for a, b in zip(lateral, lateral[1:])), lateral)
        self.assertLess(lateral[-1], 3.4)


@pytest.mark.slow
class TestWarmStart(unittest.TestCase):
    def test_warm_start_needs_no_more_iterations(self):
        config = PlannerConfig(cost=CostParams(v_ref=5.0))
        world = build_scenario(5.0, 8.0)
        state = PlannerState.initial(config)
        solver = CILQRSolver(config.solver)
        compared = no_worse = 0
        for _ in range(50):
            warm = state.previous_solution is not None
            plan = plan_step(world.ego, world.vehicles, state, config, world.lanes, solver)
            if warm and plan.rung >= 0:
                cold = solver.solve(plan.problem)
                compared += 1
                no_worse += plan.result.iterations <= cold.iterations
            world, record = world_step(world, plan.controls[0])
            self.assertIsNone(record.collision)
        self.assertGreaterEqual(compared, 40)
        self.assertGreaterEqual(no_worse / compared, 0.9)


if __name__ == "__main__":
    unittest.main()
