import dataclasses
import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase
from numpy.testing import assert_allclose, assert_array_equal

from core.exceptions import ConsistencyDivergedError, ODEBlowUpError, OutsideGridError, SpecError
from core.utils import write_json
from games.reference import coupled_spec, scalar_spec, scalar_subpop, two_type_spec
from games.serializers import dump_spec
from solver.meanfield import (
    SolverConfig, aggregate_drift, consistency_residual, feedback_gains, solve_consistency, steady_state,
)
from solver.numerics import (
    TimeGrid, Trajectory, derive_seed, fit_rate, integrate_ode, psd_factor, sample_gaussian, spectral_abscissa,
)
from solver.riccati import (
    RiccatiSolution, are_residual, solve_differential_riccati, solve_discounted_are, verify_stability,
)


class IntegratorTests(SimpleTestCase):
    def test_exponential_growth(self):
        traj = integrate_ode(lambda t, y: y, [1.0], TimeGrid(0.0, 1.0, 100))
        assert_allclose(traj.values[-1], [np.e], rtol=1e-9)

    def test_fourth_order_convergence(self):
        errors = [abs(integrate_ode(lambda t, y: y, [1.0], TimeGrid(0.0, 1.0, steps)).values[-1, 0] - np.e)
                  for steps in (10, 20)]
        self.assertTrue(14.0 < errors[0] / errors[1] < 18.0)

    def test_backward_direction(self):
        traj = integrate_ode(lambda t, y: -y, [1.0], TimeGrid(0.0, 2.0, 200), direction="backward")
        assert_allclose(traj.values[0], [np.exp(2.0)], rtol=1e-9)
        self.assertEqual(traj.values[-1, 0], 1.0)

    def test_blow_up_reports_time(self):
        with self.assertRaises(ODEBlowUpError) as ctx:
            integrate_ode(lambda t, y: y ** 2, [1.0], TimeGrid(0.0, 2.0, 50))
        self.assertLessEqual(ctx.exception.t, 2.0)

    def test_trajectory_interpolates_and_rejects_outside(self):
        traj = Trajectory(TimeGrid(0.0, 1.0, 2), [[0.0], [1.0], [4.0]])
        assert_allclose(traj.at(0.75), [2.5])
        with self.assertRaises(OutsideGridError):
            traj.at(1.5)


class LinearAlgebraTests(SimpleTestCase):
    def test_spectral_abscissa(self):
        self.assertEqual(spectral_abscissa([[-1.0, 0.0], [0.0, 2.0]]), 2.0)
        self.assertAlmostEqual(spectral_abscissa([[0.0, 1.0], [-1.0, -0.5]]), -0.25)

    def test_spectral_abscissa_is_similarity_invariant(self):
        M = np.array([[-1.0, 3.0], [0.0, -2.0]])
        c, s = np.cos(0.3), np.sin(0.3)
        U = np.array([[c, -s], [s, c]])
        self.assertAlmostEqual(spectral_abscissa(U @ M @ U.T), spectral_abscissa(M))

    def test_spectral_abscissa_needs_square(self):
        with self.assertRaises(SpecError):
            spectral_abscissa(np.ones((2, 3)))

    def test_psd_factor_handles_singular_covariance(self):
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])
        L = psd_factor(cov)
        assert_allclose(L @ L.T, cov, atol=1e-9)
        assert_array_equal(psd_factor(np.zeros((2, 2))), np.zeros((2, 2)))

    def test_psd_factor_rejects_indefinite(self):
        with self.assertRaises(SpecError):
            psd_factor([[1.0, 0.0], [0.0, -1.0]])


class SamplingTests(SimpleTestCase):
    def test_zero_covariance_returns_mean(self):
        rng = np.random.default_rng(1)
        assert_array_equal(sample_gaussian([1.0, 2.0], np.zeros((2, 2)), rng), [1.0, 2.0])

    def test_sample_moments(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        draws = sample_gaussian([1.0, -1.0], cov, np.random.default_rng(7), size=40000)
        assert_allclose(draws.mean(axis=0), [1.0, -1.0], atol=0.05)
        assert_allclose(np.cov(draws.T), cov, atol=0.05)

    def test_fit_rate(self):
        xs = np.array([8.0, 32.0, 128.0, 512.0])
        self.assertAlmostEqual(fit_rate(xs, 3.0 * xs ** -0.5), -0.5)
        with self.assertRaises(SpecError):
            fit_rate([1.0, 2.0], [1.0, 2.0])

    def test_derived_seeds(self):
        self.assertEqual(derive_seed(5, 16, 0), derive_seed(5, 16, 0))
        self.assertNotEqual(derive_seed(5, 16, 0), derive_seed(5, 16, 1))
        self.assertLess(derive_seed(5, 16, 0), 2 ** 63)


class AlgebraicRiccatiTests(SimpleTestCase):
    def test_scalar_discounted(self):
        sol = solve_discounted_are(scalar_subpop(), 0.5)
        expected = (-0.5 + np.sqrt(0.25 + 4.0)) / 2.0
        self.assertAlmostEqual(sol.Pi[0, 0], expected, places=9)
        self.assertAlmostEqual(expected, 0.780776, places=6)
        self.assertLess(sol.residual, 1e-10)
        self.assertLess(sol.closed_loop_abscissa, 0.25)

    def test_undiscounted(self):
        self.assertAlmostEqual(solve_discounted_are(scalar_subpop(), 0.0).Pi[0, 0], 1.0, places=9)

    def test_cross_term(self):
        sol = solve_discounted_are(scalar_subpop(Q=2.0, S=1.0), 0.0)
        self.assertAlmostEqual(sol.Pi[0, 0], np.sqrt(2.0) - 1.0, places=9)

    def test_discount_is_a_shift_of_A(self):
        p = scalar_subpop(A=0.3, Q=1.5)
        shifted = p.replace(A=p.A - 0.5 * 0.4 * np.eye(1))
        assert_allclose(solve_discounted_are(p, 0.4).Pi, solve_discounted_are(shifted, 0.0).Pi, atol=1e-9)

    def test_monotone_in_state_cost(self):
        low = solve_discounted_are(scalar_subpop(Q=1.0), 0.5).Pi[0, 0]
        high = solve_discounted_are(scalar_subpop(Q=2.0), 0.5).Pi[0, 0]
        self.assertGreater(high, low)

    def test_vector_residual(self):
        p = two_type_spec().subpops[1]
        sol = solve_discounted_are(p, 0.5)
        self.assertLess(are_residual(sol.Pi, p, 0.5), 1e-10)


class DifferentialRiccatiTests(SimpleTestCase):
    def test_tanh_solution(self):
        grid = TimeGrid(0.0, 2.0, 400)
        traj = solve_differential_riccati(scalar_subpop(), 0.0, [[0.0]], grid)
        assert_allclose(traj.values[:, 0, 0], np.tanh(2.0 - grid.times), atol=1e-9)

    def test_stationary_from_are(self):
        p = scalar_subpop(A=-0.2)
        Pi = solve_discounted_are(p, 0.5).Pi
        traj = solve_differential_riccati(p, 0.5, Pi, TimeGrid(0.0, 3.0, 300))
        assert_allclose(traj.values[0], Pi, atol=1e-9)

    def test_zero_cost_stays_zero(self):
        traj = solve_differential_riccati(scalar_subpop(Q=0.0), 0.5, [[0.0]], TimeGrid(0.0, 1.0, 10))
        assert_array_equal(traj.values, np.zeros((11, 1, 1)))

    def test_indefinite_terminal_needs_opt_in(self):
        p = scalar_subpop().replace(
            A=np.zeros((2, 2)), B=np.array([[1.0], [0.0]]), Q=np.zeros((2, 2)), S=np.zeros((2, 1)))
        terminal = [[1.0, -1.0], [-1.0, 0.0]]
        with self.assertRaises(SpecError):
            solve_differential_riccati(p, 0.0, terminal, TimeGrid(0.0, 1.0, 10))
        traj = solve_differential_riccati(p, 0.0, terminal, TimeGrid(0.0, 1.0, 10), require_psd=False)
        self.assertEqual(traj.values.shape, (11, 2, 2))


class StabilityTests(SimpleTestCase):
    def test_margins(self):
        sol = RiccatiSolution(Pi=np.array([[1.0]]), residual=0.0, iterations=1, closed_loop_abscissa=-1.0)
        self.assertTrue(verify_stability(sol, np.array([[-1.0]]), 0.5).ok)
        report = verify_stability(sol, np.array([[1.0]]), 0.5)
        self.assertFalse(report.ok)
        self.assertAlmostEqual(report.abar_margin, -0.75)
        self.assertEqual(len(report.messages), 1)


class GainTests(SimpleTestCase):
    def test_scalar_gains(self):
        spec = scalar_spec()
        grid = TimeGrid(0.0, 1.0, 4)
        s = [Trajectory(grid, np.zeros((5, 1)))]
        J, L = feedback_gains([np.array([[1.0]])], s, spec)
        assert_array_equal(J, [[-1.0]])
        assert_array_equal(L.values, np.zeros((5, 1)))
        Abar, mbar = aggregate_drift(spec, [np.array([[1.0]])], J, s)
        assert_allclose(Abar, [[-1.0]])
        assert_allclose(mbar.values, np.zeros((5, 1)))

    def test_gain_shape_for_two_types(self):
        spec = two_type_spec()
        grid = TimeGrid(0.0, 1.0, 4)
        s = [Trajectory(grid, np.zeros((5, 1))) for _ in range(2)]
        J, L = feedback_gains([np.eye(1), 2.0 * np.eye(1)], s, spec)
        self.assertEqual(J.shape, (2, 2))
        self.assertEqual(L.values.shape, (5, 2))

    def test_wrong_count(self):
        grid = TimeGrid(0.0, 1.0, 4)
        with self.assertRaises(SpecError):
            feedback_gains([np.eye(1)], [Trajectory(grid, np.zeros((5, 1)))], two_type_spec())


class ConsistencyTests(SimpleTestCase):
    def test_decoupled_converges_immediately(self):
        spec = scalar_spec(x0=1.0)
        sol = solve_consistency(spec, SolverConfig(horizon=10.0, steps=1000))
        self.assertEqual(sol.iterations, 1)
        Pi = sol.Pi[0].Pi[0, 0]
        assert_allclose(sol.xbar.values[:, 0], np.exp(-Pi * sol.grid.times), atol=1e-8)
        assert_allclose(sol.s[0].values, 0.0, atol=1e-12)

    def test_constant_drift_reaches_steady_state(self):
        spec = coupled_spec()
        sol = solve_consistency(spec, SolverConfig(horizon=40.0, steps=2000))
        ss = steady_state(spec, [P.Pi for P in sol.Pi])
        assert_allclose(sol.xbar.at(35.0), ss.xbar, atol=1e-6)
        assert_allclose(sol.s[0].values[-1], ss.s[0], atol=1e-12)
        self.assertTrue(sol.stable)

    def test_steady_state_offset(self):
        spec = scalar_spec(eta=1.0)
        Pi = solve_discounted_are(spec.subpops[0], spec.rho).Pi
        ss = steady_state(spec, [Pi])
        s = 1.0 / (spec.rho + Pi[0, 0])
        assert_allclose(ss.s[0], [s], atol=1e-12)
        assert_allclose(ss.xbar, [-s / Pi[0, 0]], atol=1e-12)

    def test_unstable_aggregate_drift(self):
        with self.assertRaises(ConsistencyDivergedError):
            solve_consistency(scalar_spec(F=2.0), SolverConfig(horizon=5.0, steps=100))

    def test_residual_is_small_and_detects_corruption(self):
        spec = coupled_spec()
        sol = solve_consistency(spec, SolverConfig(horizon=20.0, steps=1000))
        self.assertLess(consistency_residual(sol, spec), 1e-6)
        broken = dataclasses.replace(sol, xbar=Trajectory(sol.grid, sol.xbar.values + 0.1))
        self.assertGreater(consistency_residual(broken, spec), 0.01)

    def test_labels_share_the_solution(self):
        spec = two_type_spec()
        config = SolverConfig(horizon=10.0, steps=500)
        classical = solve_consistency(spec, config, label="classical")
        exploratory = solve_consistency(spec, config, label="exploratory")
        assert_array_equal(classical.xbar.values, exploratory.xbar.values)
        assert_array_equal(classical.J, exploratory.J)
        self.assertEqual(classical.label, "classical")

    def test_two_type_reference_meets_every_check(self):
        spec = two_type_spec()
        sol = solve_consistency(spec, SolverConfig(horizon=20.0, steps=1000))
        self.assertLess(sol.residual, 1e-6)
        self.assertLess(consistency_residual(sol, spec), 1e-5)
        self.assertEqual(len(sol.stability), 2)
        for report in sol.stability:
            self.assertGreater(report.abar_margin, 0.0)
            self.assertGreater(report.closed_loop_margin, 0.0)
            self.assertGreater(report.pi_min_eigenvalue, 0.0)
        self.assertTrue(sol.stable)

    def test_unknown_label(self):
        with self.assertRaises(SpecError):
            solve_consistency(scalar_spec(), label="greedy")

    def test_config_validation(self):
        with self.assertRaises(SpecError):
            SolverConfig(damping=0.0)


class SolveCommandTests(TestCase):
    def _write(self, tmp, spec):
        path = Path(tmp) / "spec.json"
        write_json(path, dump_spec(spec))
        return path

    def test_solve_writes_outputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, coupled_spec())
            out = Path(tmp) / "run"
            call_command("solve", str(path), out=str(out), horizon=10.0, steps=500, stdout=StringIO())
            solution = json.loads((out / "meanfield_solution.json").read_text())
            report = json.loads((out / "stability_report.json").read_text())
        self.assertEqual(len(solution["times"]), 501)
        self.assertTrue(report["ok"])

    def test_missing_spec_exits_one(self):
        with self.assertRaises(CommandError) as ctx:
            call_command("solve", "/nonexistent/spec.json", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)

    def test_diverging_spec_exits_two(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, scalar_spec(F=2.0))
            out = Path(tmp) / "run"
            with self.assertRaises(CommandError) as ctx:
                call_command("solve", str(path), out=str(out), horizon=5.0, steps=100, stdout=StringIO())
            error = json.loads((out / "error.json").read_text())
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertEqual(error["code"], "consistency_diverged")
