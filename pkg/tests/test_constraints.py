import math
import unittest

import numpy as np
import numpy.testing as npt

from lanesmith.constraints import (
    BarrierParams,
    ConstraintResidual,
    ObstacleEllipse,
    SafetyConfig,
    barrier,
    control_bound_residuals,
    control_residuals,
    ellipse_arrays,
    safety_residual,
    safety_residuals,
)
from lanesmith.errors import ValidationError
from lanesmith.vehicle_model import Axle, ControlInput, EgoParams, VehicleState, clamp_control, ego_circles


def _rotate(x, y, angle):
    c, s = math.cos(angle), math.sin(angle)
    return c * x - s * y, s * x + c * y


class TestObstacleEllipse(unittest.TestCase):
    def test_axis_invariant(self):
        ObstacleEllipse((0, 0), 0.0, 2.0, 2.0)
        with self.assertRaises(ValidationError):
            ObstacleEllipse((0, 0), 0.0, 1.0, 2.0)
        with self.assertRaises(ValidationError):
            ObstacleEllipse((0, 0), 0.0, 1.0, 0.0)

    def test_config_invariants(self):
        with self.assertRaises(ValidationError):
            SafetyConfig(-0.1)
        with self.assertRaises(ValidationError):
            BarrierParams(0.0, 5.0)

    def test_ellipse_arrays_needs_equal_counts(self):
        e = ObstacleEllipse((0, 0), 0.0, 2.0, 1.0)
        with self.assertRaises(ValidationError):
            ellipse_arrays([[e], [e, e]])
        centers, yaws, a, b = ellipse_arrays([[e, e]] * 3)
        self.assertEqual(centers.shape, (3, 2, 2))
        self.assertEqual(yaws.shape, (3, 2))


class TestSafetyResidual(unittest.TestCase):
    def setUp(self):
        self.ego = EgoParams()
        self.cfg = SafetyConfig(0.1)
        self.inflation = self.ego.circle_radius + self.cfg.s_min

    def test_center_is_maximal_violation(self):
        obstacle = ObstacleEllipse((5.0, 1.0), 0.3, 3.0, 1.0)
        r = safety_residual(VehicleState(5.0, 1.0, 2.0, 0.0), self.ego, obstacle, self.cfg, Axle.REAR)
        self.assertAlmostEqual(r.value, -1.0)

    def test_boundary_on_long_axis(self):
        obstacle = ObstacleEllipse((0.0, 0.0), 0.0, 3.0, 1.0)
        state = VehicleState(3.0 + self.inflation, 0.0, 2.0, 0.0)
        r = safety_residual(state, self.ego, obstacle, self.cfg, Axle.REAR)
        self.assertAlmostEqual(r.value, 0.0, places=12)

    def test_rotated_obstacle_uses_short_axis(self):
        d = 4.0
        obstacle = ObstacleEllipse((0.0, 0.0), math.pi / 2, 3.0, 1.0)
        r = safety_residual(VehicleState(d, 0.0, 2.0, math.pi), self.ego, obstacle, self.cfg, Axle.REAR)
        self.assertAlmostEqual(r.value, d ** 2 / (1.0 + self.inflation) ** 2 - 1.0, places=12)

    def test_front_axle_uses_front_circle(self):
        obstacle = ObstacleEllipse((10.0, 0.0), 0.0, 3.0, 1.0)
        state = VehicleState(10.0 - self.ego.wheelbase, 0.0, 2.0, 0.0)
        front = safety_residual(state, self.ego, obstacle, self.cfg, Axle.FRONT)
        self.assertAlmostEqual(front.value, -1.0)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            center = rng.uniform(-10, 10, 2)
            yaw = rng.uniform(-math.pi, math.pi)
            state = VehicleState(*rng.uniform(-15, 15, 2), 3.0, rng.uniform(-math.pi, math.pi))
            phi = rng.uniform(-math.pi, math.pi)
            rx, ry = _rotate(state.px - center[0], state.py - center[1], phi)
            rotated_state = VehicleState(center[0] + rx, center[1] + ry, 3.0, state.theta + phi)
            for axle in (Axle.FRONT, Axle.REAR):
                before = safety_residual(state, self.ego, ObstacleEllipse(center, yaw, 3.0, 1.0), self.cfg, axle)
                after = safety_residual(
                    rotated_state, self.ego, ObstacleEllipse(center, yaw + phi, 3.0, 1.0), self.cfg, axle
                )
                self.assertAlmostEqual(before.value, after.value, delta=1e-9)

    def test_monotone_radially(self):
        obstacle = ObstacleEllipse((0.0, 0.0), 0.4, 3.0, 1.0)
        direction = np.array([math.cos(1.1), math.sin(1.1)])
        values = [
            safety_residual(VehicleState(*(r * direction), 1.0, 0.0), self.ego, obstacle, self.cfg, Axle.REAR).value
            for r in np.linspace(0.0, 10.0, 51)
        ]
        self.assertTrue(all(a <= b for a, b in zip(values, values[1:])))

    def test_sign_matches_point_in_ellipse(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            obstacle = ObstacleEllipse(tuple(rng.uniform(-3, 3, 2)), rng.uniform(-3, 3), 2.5, 1.0)
            state = VehicleState(*rng.uniform(-8, 8, 2), 1.0, rng.uniform(-3, 3))
            r = safety_residual(state, self.ego, obstacle, self.cfg, Axle.FRONT)
            cx, cy = ego_circles(state, self.ego)[0]
            lx, ly = _rotate(cx - obstacle.center[0], cy - obstacle.center[1], -obstacle.yaw)
            a = obstacle.half_long_axis + self.inflation
            b = obstacle.half_short_axis + self.inflation
            outside = (lx / a) ** 2 + (ly / b) ** 2 >= 1.0
            if abs(r.value) > 1e-12:
                self.assertEqual(r.value >= 0.0, outside)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        obstacle = ObstacleEllipse((2.0, 1.0), 0.3, 3.0, 1.0)
        for _ in range(1000):
            x = np.array([rng.uniform(-8, 8), rng.uniform(-4, 4), rng.uniform(0, 5), rng.uniform(-2.5, 2.5)])
            axle = Axle.FRONT if rng.uniform() < 0.5 else Axle.REAR
            r = safety_residual(VehicleState.from_array(x), self.ego, obstacle, self.cfg, axle)
            fd = np.zeros(4)
            for j in range(4):
                d = np.zeros(4)
                d[j] = 1e-6
                plus = safety_residual(VehicleState.from_array(x + d), self.ego, obstacle, self.cfg, axle).value
                minus = safety_residual(VehicleState.from_array(x - d), self.ego, obstacle, self.cfg, axle).value
                fd[j] = (plus - minus) / 2e-6
            npt.assert_allclose(r.gradient[:4], fd, rtol=1e-5, atol=1e-7)
            npt.assert_array_equal(r.gradient[4:], [0.0, 0.0])

    def test_batched_matches_scalar(self):
        obstacles = [ObstacleEllipse((3.0, 0.5), 0.1, 2.5, 0.9), ObstacleEllipse((-4.0, 3.5), 0.0, 3.0, 0.9)]
        states = np.array([[0.0, 0.0, 2.0, 0.1], [1.0, 1.0, 2.0, -0.2]])
        centers, yaws, a, b = ellipse_arrays([obstacles, obstacles])
        values, _ = safety_residuals(states, centers, yaws, a, b, self.ego, self.cfg.s_min)
        for i in range(2):
            for k, obstacle in enumerate(obstacles):
                for j, axle in enumerate((Axle.FRONT, Axle.REAR)):
                    scalar = safety_residual(VehicleState.from_array(states[i]), self.ego, obstacle, self.cfg, axle)
                    self.assertAlmostEqual(values[i, k, j], scalar.value, places=14)


class TestControlBoundResiduals(unittest.TestCase):
    def setUp(self):
        self.ego = EgoParams()

    def test_upper_acceleration_boundary(self):
        residuals = control_bound_residuals(ControlInput(self.ego.a_max, 0.0), VehicleState(0, 0, 2, 0), self.ego)
        self.assertEqual(residuals[1].value, 0.0)

    def test_yaw_rate_at_standstill(self):
        residuals = control_bound_residuals(ControlInput(0.0, 0.1), VehicleState(0, 0, 0, 0), self.ego)
        self.assertAlmostEqual(residuals[2].value, 0.1)
        self.assertAlmostEqual(residuals[3].value, -0.1)

    def test_interior_point(self):
        a = 0.5 * (self.ego.a_min + self.ego.a_max)
        residuals = control_bound_residuals(ControlInput(a, 0.0), VehicleState(0, 0, 3, 0), self.ego)
        self.assertEqual(len(residuals), 4)
        self.assertTrue(all(r.value > 0.0 for r in residuals))

    def test_clamped_yaw_rate_sits_on_the_bound(self):
        for v in (0.3, 0.5, 1.3, 2.0, 4.7):
            for request in (-10.0, 10.0):
                a, theta_dot = clamp_control(0.0, request, v, self.ego, 0.1)
                values, _ = control_residuals(np.array([[0.0, 0.0, v, 0.0]]), np.array([[a, theta_dot]]), self.ego)
                self.assertEqual(values[0, 2 if request < 0 else 3], 0.0)

    def test_fixed_bound_speeds(self):
        states = np.array([[0.0, 0.0, 2.0, 0.0], [1.0, 0.0, 3.0, 0.0]])
        controls = np.array([[0.5, 0.1], [-1.0, -0.2]])
        values, grads = control_residuals(states, controls, self.ego, bound_speeds=np.array([1.0, 1.5]))
        slowed = states.copy()
        slowed[:, 2] = (1.0, 1.5)
        expected, own_grads = control_residuals(slowed, controls, self.ego)
        npt.assert_array_equal(values, expected)
        npt.assert_array_equal(grads[:, 2], 0.0)
        self.assertLess(own_grads[2, 2], 0.0)
        self.assertGreater(own_grads[3, 2], 0.0)
        npt.assert_array_equal(np.delete(grads, 2, axis=1), np.delete(own_grads, 2, axis=1))

    def test_gradient_shape(self):
        with self.assertRaises(ValidationError):
            ConstraintResidual(0.0, np.zeros(4))


class TestBarrier(unittest.TestCase):
    def test_value_at_zero_residual(self):
        term = barrier(ConstraintResidual(0.0, np.ones(6)), BarrierParams(1.0, 5.0))
        self.assertEqual(term.value, 1.0)

    def test_vanishes_for_large_residual(self):
        term = barrier(ConstraintResidual(50.0, np.ones(6)), BarrierParams(1.0, 5.0))
        self.assertLess(term.value, 1e-100)

    def test_violated_residual_stays_finite(self):
        term = barrier(ConstraintResidual(-1e6, np.ones(6)), BarrierParams(1.0, 5.0))
        self.assertTrue(np.isfinite(term.value))
        self.assertTrue(np.all(np.isfinite(term.hessian)))

    def test_hessian_is_psd(self):
        rng = np.random.default_rng(1)
        params = BarrierParams(3.0, 10.0)
        for _ in range(200):
            term = barrier(ConstraintResidual(rng.uniform(-1, 2), rng.normal(size=6)), params)
            self.assertGreaterEqual(np.linalg.eigvalsh(term.hessian).min(), -1e-10 * max(1.0, term.value))

    def test_gradient_matches_finite_differences_through_safety(self):
        ego = EgoParams()
        cfg = SafetyConfig(0.1)
        obstacle = ObstacleEllipse((4.0, 0.0), 0.0, 3.0, 1.0)
        params = BarrierParams(1.0, 5.0)
        rng = np.random.default_rng(9)

        def value(x):
            r = safety_residual(VehicleState.from_array(x), ego, obstacle, cfg, Axle.REAR)
            return barrier(r, params).value

        for _ in range(1000):
            x = np.array([rng.uniform(-4, 10), rng.uniform(-3, 3), rng.uniform(0, 5), rng.uniform(-2.5, 2.5)])
            term = barrier(safety_residual(VehicleState.from_array(x), ego, obstacle, cfg, Axle.REAR), params)
            fd = np.zeros(4)
            for j in range(4):
                d = np.zeros(4)
                d[j] = 1e-6
                fd[j] = (value(x + d) - value(x - d)) / 2e-6
            npt.assert_allclose(term.gradient[:4], fd, rtol=1e-5, atol=1e-7)


if __name__ == "__main__":
    unittest.main()
