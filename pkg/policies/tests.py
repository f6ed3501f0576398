import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from scipy.integrate import trapezoid

from core.exceptions import DegeneratePolicyError, QuadratureError, SpecError
from games.reference import scalar_spec, vector_spec
from policies.policy import (
    GaussianPolicy, analytic_coe, classical_control, exploratory_policy, gaussian_pdf, policy_entropy, sample_action,
    value_gap, value_gap_standard,
)
from policies.variational import (
    Direction, admissible_direction_path, entropy_audit, exploratory_cost_quadrature, gateaux_derivative,
    gaussian_density, mean_shift_direction_path, optimal_density_path, path_cost, perturb_density,
    shifted_density_path, zero_direction_path,
)
from solver.meanfield import SolverConfig, solve_consistency
from solver.numerics import TimeGrid

LN_2PI = np.log(2.0 * np.pi)


def _decoupled(lambda_explore=0.25):
    spec = scalar_spec(rho=0.5, x0=1.0, lambda_explore=lambda_explore)
    return spec, solve_consistency(spec, SolverConfig(horizon=10.0, steps=1000))


class ClosedFormTests(SimpleTestCase):
    def test_entropy(self):
        self.assertAlmostEqual(policy_entropy(0, scalar_spec(lambda_explore=1.0)), 1.418939, places=6)
        self.assertAlmostEqual(policy_entropy(0, scalar_spec(lambda_explore=0.25)), 0.725791, places=6)
        with self.assertRaisesMessage(DegeneratePolicyError, "entropy undefined (Dirac)"):
            policy_entropy(0, scalar_spec())

    def test_cost_of_exploration(self):
        self.assertEqual(analytic_coe(0, scalar_spec(rho=0.5, lambda_explore=1.0)), 1.0)
        self.assertEqual(analytic_coe(0, scalar_spec(rho=0.5)), 0.0)
        self.assertAlmostEqual(analytic_coe(0, vector_spec(rho=0.1, lambda_explore=0.2)), 2.0)

    def test_value_gap(self):
        spec = scalar_spec(rho=0.5, lambda_explore=1.0)
        self.assertAlmostEqual(value_gap(0, spec), LN_2PI - 1.0, places=12)
        self.assertAlmostEqual(value_gap(0, spec), 0.837877, places=6)
        self.assertAlmostEqual(value_gap_standard(0, spec), LN_2PI, places=12)

    def test_value_gap_changes_sign_at_e_over_2pi(self):
        root = np.e / (2.0 * np.pi)
        self.assertAlmostEqual(value_gap(0, scalar_spec(lambda_explore=root)), 0.0, places=12)
        self.assertLess(value_gap(0, scalar_spec(lambda_explore=0.5 * root)), 0.0)
        self.assertGreater(value_gap(0, scalar_spec(lambda_explore=2.0 * root)), 0.0)

    def test_value_gap_needs_exploration(self):
        with self.assertRaises(SpecError):
            value_gap(0, scalar_spec())


class PolicyTests(SimpleTestCase):
    def test_classical_control_is_linear_feedback(self):
        spec, mf = _decoupled()
        Pi = mf.Pi[0].Pi[0, 0]
        assert_allclose(classical_control(0.0, np.array([2.0]), mf, 0), [-2.0 * Pi])
        batch = classical_control(1.0, np.array([[1.0], [-1.0]]), mf, 0)
        assert_allclose(batch, [[-Pi], [Pi]])

    def test_exploratory_mean_is_classical_control(self):
        spec, mf = _decoupled()
        x = np.array([0.7])
        point = exploratory_policy(2.0, x, mf, 0)
        assert_allclose(point.mean, classical_control(2.0, x, mf, 0))
        assert_allclose(point.covariance, [[0.25]])

    def test_dirac_policy_samples_its_mean(self):
        spec, mf = _decoupled(lambda_explore=0.0)
        point = exploratory_policy(0.0, np.array([1.0]), mf, 0)
        draw = sample_action(point, np.random.default_rng(0))
        assert_allclose(draw, point.mean)

    def test_gaussian_policy_samples(self):
        spec, mf = _decoupled(lambda_explore=0.5)
        policy = GaussianPolicy(mf, 0)
        self.assertFalse(policy.is_dirac)
        rng = np.random.default_rng(3)
        draws = np.array([policy.sample(0.0, np.array([1.0]), rng) for _ in range(20000)])
        self.assertAlmostEqual(draws.mean(), policy.mean(0.0, np.array([1.0]))[0], delta=0.03)
        self.assertAlmostEqual(draws.var(), 0.5, delta=0.03)

    def test_density_integrates_to_one(self):
        u = np.linspace(-10.0, 10.0, 4001)[:, None]
        values = gaussian_pdf(u, [0.5], [[0.3]])
        self.assertAlmostEqual(trapezoid(values, u[:, 0]), 1.0, places=8)
        with self.assertRaises(DegeneratePolicyError):
            gaussian_pdf(u, [0.0], [[0.0]])


class GridDensityTests(SimpleTestCase):
    def test_scalar_entropy_by_quadrature(self):
        phi = gaussian_density([0.3], [[0.25]])
        self.assertAlmostEqual(phi.integral(), 1.0, places=12)
        self.assertAlmostEqual(phi.entropy(), 0.725791, delta=1e-4)
        assert_allclose(phi.mean(), [0.3], atol=1e-10)
        assert_allclose(phi.covariance(), [[0.25]], atol=1e-6)

    def test_planar_entropy_by_quadrature(self):
        cov = np.diag([0.25, 0.5])
        phi = gaussian_density([0.0, 1.0], cov, nodes=201)
        expected = 0.5 * np.log(np.linalg.det(2.0 * np.pi * np.e * cov))
        self.assertAlmostEqual(phi.entropy(), expected, delta=1e-4)

    def test_three_dimensional_controls_are_refused(self):
        with self.assertRaisesMessage(SpecError, "quadrature restricted to m <= 2"):
            gaussian_density(np.zeros(3), np.eye(3))

    def test_dirac_has_no_density(self):
        with self.assertRaises(DegeneratePolicyError):
            gaussian_density([0.0], [[0.0]])

    def test_perturbation(self):
        phi = gaussian_density([0.0], [[1.0]], nodes=101)
        omega = Direction.on(phi, phi.points()[..., 0])
        self.assertTrue(np.array_equal(perturb_density(phi, omega, 0.0).values, phi.values))
        tilted = perturb_density(phi, omega, 0.5)
        self.assertFalse(tilted.normalized)
        self.assertAlmostEqual(tilted.mean()[0], 0.5, places=4)

    def test_perturbation_on_another_grid(self):
        phi = gaussian_density([0.0], [[1.0]], nodes=101)
        other = gaussian_density([1.0], [[1.0]], nodes=101)
        with self.assertRaises(SpecError):
            perturb_density(phi, Direction.on(other, np.zeros(101)), 0.1)

    def test_perturbation_overflow(self):
        phi = gaussian_density([0.0], [[1.0]], nodes=101)
        with self.assertRaises(QuadratureError):
            perturb_density(phi, Direction.on(phi, np.full(101, 1e3)), 1.0)


class CostFunctionalTests(SimpleTestCase):
    grid = TimeGrid(0.0, 5.0, 500)

    def test_decoupled_cost_matches_closed_form(self):
        spec, mf = _decoupled()
        path, state, _ = optimal_density_path(mf, 0, spec, self.grid)
        cost = exploratory_cost_quadrature(path, state, mf, 0, spec, self.grid)
        Pi, rho, lam, T = mf.Pi[0].Pi[0, 0], spec.rho, 0.25, self.grid.t1
        H = 0.5 * np.log(2.0 * np.pi * np.e * lam)
        c = rho + 2.0 * Pi
        expected = 0.5 * (1.0 + Pi ** 2) * (1.0 - np.exp(-c * T)) / c \
            + (0.5 * lam - lam * H) * (1.0 - np.exp(-rho * T)) / rho
        self.assertAlmostEqual(cost, expected, delta=1e-4)

    def test_mass_term_vanishes_for_normalized_densities(self):
        spec, mf = _decoupled()
        path, state, _ = optimal_density_path(mf, 0, spec, self.grid)
        with_multiplier = spec.with_subpop(0, phi_lagrange=5.0)
        self.assertAlmostEqual(
            exploratory_cost_quadrature(path, state, mf, 0, spec, self.grid),
            exploratory_cost_quadrature(path, state, mf, 0, with_multiplier, self.grid),
            places=9,
        )

    def test_cost_is_affine_in_lambda(self):
        spec, mf = _decoupled()
        _, _, means = optimal_density_path(mf, 0, spec, self.grid)
        path = shifted_density_path(means, [[0.25]], nodes=201)
        costs = [path_cost(path, mf, 0, spec.with_subpop(0, lambda_explore=lam), self.grid)
                 for lam in (0.1, 0.3, 0.5)]
        self.assertAlmostEqual(costs[1] - costs[0], costs[2] - costs[1], places=10)

    def test_inconsistent_state_path_is_rejected(self):
        spec, mf = _decoupled()
        path, state, means = optimal_density_path(mf, 0, spec, self.grid, nodes=101)
        shifted = shifted_density_path(means, [[0.25]], shift=1.0, nodes=101)
        with self.assertRaises(SpecError):
            exploratory_cost_quadrature(shifted, state, mf, 0, spec, self.grid)

    def test_optimal_path_minimises_the_family(self):
        spec, mf = _decoupled()
        path, _, means = optimal_density_path(mf, 0, spec, self.grid, nodes=201)
        best = path_cost(path, mf, 0, spec, self.grid, include_tail=True)
        costs = {}
        for shift, scale in ((-0.5, 1.0), (0.5, 1.0), (0.0, 0.5), (0.0, 2.0)):
            other = shifted_density_path(means, [[0.25]], shift=shift, scale=scale, nodes=201)
            costs[shift, scale] = path_cost(other, mf, 0, spec, self.grid, include_tail=True)
            self.assertGreater(costs[shift, scale], best)
        self.assertLess(best, 0.5 * (costs[-0.5, 1.0] + costs[0.5, 1.0]))


class GateauxTests(SimpleTestCase):
    grid = TimeGrid(0.0, 5.0, 500)

    def test_vanishes_at_the_optimum(self):
        spec, mf = _decoupled()
        path, _, _ = optimal_density_path(mf, 0, spec, self.grid, nodes=201)
        omega = admissible_direction_path(path, np.random.default_rng(11))
        self.assertLess(abs(gateaux_derivative(path, omega, mf, 0, spec, 1e-3, self.grid)), 1e-3)

    def test_descent_toward_the_optimum(self):
        spec, mf = _decoupled()
        _, _, means = optimal_density_path(mf, 0, spec, self.grid, nodes=201)
        away = shifted_density_path(means, [[0.25]], shift=0.5, nodes=201)
        omega = mean_shift_direction_path(away, means)
        self.assertLess(gateaux_derivative(away, omega, mf, 0, spec, 1e-3, self.grid), 0.0)

    def test_zero_direction(self):
        spec, mf = _decoupled()
        path, _, _ = optimal_density_path(mf, 0, spec, self.grid, nodes=51)
        derivative = gateaux_derivative(path, zero_direction_path(path), mf, 0, spec, 1e-3, self.grid)
        self.assertEqual(derivative, 0.0)

    def test_scalar_controls_only(self):
        spec = vector_spec()
        with self.assertRaises(SpecError):
            gateaux_derivative([], [], None, 0, spec, 1e-3, self.grid)


class EntropyAuditTests(SimpleTestCase):
    def test_three_evaluations(self):
        audit = entropy_audit(0, scalar_spec(rho=0.5, lambda_explore=1.0))
        self.assertAlmostEqual(audit.entropy_closed_form, 1.418939, places=6)
        self.assertAlmostEqual(audit.entropy_quadrature, audit.entropy_closed_form, delta=1e-4)
        self.assertAlmostEqual(audit.discounted_standard, -(LN_2PI + 1.0), places=12)
        self.assertAlmostEqual(audit.discounted_display, LN_2PI, places=12)
        self.assertAlmostEqual(audit.discounted_quadrature, audit.discounted_standard, delta=1e-3)
        self.assertAlmostEqual(audit.discrepancy, 2.0 * LN_2PI + 1.0, places=12)
        self.assertEqual(audit.to_dict()["k"], 0)
