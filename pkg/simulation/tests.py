import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase
from numpy.testing import assert_allclose, assert_array_equal

from core.exceptions import DegeneratePolicyError, HorizonTooShortError, NumericalError, SpecError
from core.utils import read_json, write_json
from games.reference import coupled_spec, scalar_spec, vector_spec
from games.serializers import dump_spec
from policies.policy import policy_entropy
from simulation.experiments import (
    coe_experiment, cost_gap_experiment, coupling_gap_experiment, lambda_sweep, nash_deviation_experiment,
    optimality_check,
)
from simulation.simulator import (
    OPTIMAL, Deviation, NoiseBank, SimConfig, deviation_family, discounted_length, empirical_cost,
    simulate_population, simulate_representative,
)
from simulation.utils import parse_list
from solver.meanfield import SolverConfig, solve_consistency
from solver.numerics import TimeGrid

SHORT = TimeGrid(0.0, 1.0, 100)


def _solved(spec, horizon=12.0, steps=1200):
    return solve_consistency(spec, SolverConfig(horizon=horizon, steps=steps))


class DeviationTests(SimpleTestCase):
    def test_family(self):
        family = deviation_family()
        self.assertEqual(len(family), 8)
        self.assertFalse(any(d.is_identity for d in family))
        self.assertTrue(OPTIMAL.is_identity)

    def test_scale_must_be_positive(self):
        with self.assertRaises(SpecError):
            Deviation(cov_scale=0.0)

    def test_config_validation(self):
        with self.assertRaises(SpecError):
            SimConfig(counts=(0,), grid=SHORT, seed=1)
        with self.assertRaises(SpecError):
            SimConfig(counts=(4,), grid=SHORT, seed=1, mode="greedy")
        with self.assertRaises(SpecError):
            SimConfig(counts=(4,), grid=SHORT, seed=1, coupling="antithetic")

    def test_noise_is_drawn_in_order(self):
        bank = NoiseBank(5, 3, 1, 1, 1, 0.01)
        bank.at(0)
        with self.assertRaises(SpecError):
            bank.at(600)


class PopulationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = coupled_spec()
        cls.mf = _solved(cls.spec)

    def test_same_seed_same_paths(self):
        config = SimConfig(counts=(16,), grid=SHORT, seed=42)
        first = simulate_population(self.spec, self.mf, config)
        second = simulate_population(self.spec, self.mf, config)
        assert_array_equal(first.states, second.states)
        assert_array_equal(first.actions, second.actions)

    def test_noiseless_agents_move_together(self):
        spec = self.spec.with_subpop(0, D=[[0.0]]).replace(x0_cov=[[0.0]])
        batch = simulate_population(spec, self.mf, SimConfig(counts=(8,), grid=SHORT, seed=1, mode="classical"))
        self.assertEqual(float(np.max(np.ptp(batch.states[..., 0], axis=1))), 0.0)

    def test_drift_ignores_sampled_actions(self):
        classical = simulate_population(self.spec, self.mf, SimConfig(counts=(16,), grid=SHORT, seed=3,
                                                                      mode="classical"))
        exploratory = simulate_population(self.spec, self.mf, SimConfig(counts=(16,), grid=SHORT, seed=3))
        assert_array_equal(classical.states, exploratory.states)
        loud = simulate_population(self.spec.with_subpop(0, lambda_explore=100.0), self.mf,
                                   SimConfig(counts=(16,), grid=SHORT, seed=3))
        assert_array_equal(loud.states, classical.states)
        self.assertFalse(np.array_equal(loud.actions, classical.actions))

    def test_action_spread_has_policy_covariance(self):
        batch = simulate_representative(self.spec, self.mf, SHORT, 11, counts=(1000,))
        spread = (batch.actions - batch.means).ravel()
        self.assertLess(abs(np.var(spread) / 0.1 - 1.0), 0.02)

    def test_recorded_averages(self):
        batch = simulate_population(self.spec, self.mf, SimConfig(counts=(32,), grid=SHORT, seed=4))
        assert_allclose(batch.recomputed_averages(), batch.xbar.values, atol=1e-14)

    def test_record_times(self):
        config = SimConfig(counts=(4,), grid=SHORT, seed=4, record=(0.5, 1.0))
        batch = simulate_population(self.spec, self.mf, config)
        assert_allclose(batch.record_times, [0.5, 1.0])
        self.assertEqual(batch.states.shape, (2, 4, 1))

    def test_sample_means_track_the_solved_mean(self):
        batch = simulate_representative(self.spec, self.mf, TimeGrid(0.0, 2.0, 200), 5, counts=(2000,),
                                        record=(2.0,))
        x = batch.states[0, :, 0]
        se = x.std(ddof=1) / np.sqrt(x.size)
        self.assertLess(abs(x.mean() - self.mf.xbar.at(2.0)[0]), 5 * se + 1e-2)
        finite = simulate_population(self.spec, self.mf, SimConfig(counts=(2000,), grid=TimeGrid(0.0, 2.0, 200),
                                                                   seed=5, record=(2.0,)))
        self.assertLess(abs(finite.states[0, :, 0].mean() - self.mf.xbar.at(2.0)[0]), 5 * se + 1e-2)

    def test_common_random_numbers(self):
        config = SimConfig(counts=(8,), grid=SHORT, seed=9, record=(0.0,))
        finite = simulate_population(self.spec, self.mf, config)
        limit = simulate_representative(self.spec, self.mf, SHORT, 9, counts=(8,), record=(0.0,))
        assert_array_equal(finite.states, limit.states)
        independent = simulate_representative(self.spec, self.mf, SHORT, 9, counts=(8,), record=(0.0,),
                                              coupling="independent")
        self.assertFalse(np.array_equal(independent.states, limit.states))

    def test_deviation_hits_agent_zero_only(self):
        config = SimConfig(counts=(4,), grid=SHORT, seed=2, record=(0.0,))
        base = simulate_population(self.spec, self.mf, config)
        shifted = simulate_population(self.spec, self.mf, config, deviation=Deviation(mean_shift=0.5))
        self.assertEqual(shifted.deviated, (0,))
        assert_allclose(shifted.means[0, 0] - base.means[0, 0], [0.5])
        assert_array_equal(shifted.means[0, 1:], base.means[0, 1:])

    def test_non_finite_state_names_the_agent(self):
        spec = self.spec.with_subpop(0, A=[[1e308]])
        with self.assertRaises(NumericalError) as ctx:
            simulate_population(spec, self.mf, SimConfig(counts=(2,), grid=SHORT, seed=1))
        self.assertEqual(ctx.exception.detail["agent"], 0)


class EmpiricalCostTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = coupled_spec()
        cls.mf = _solved(cls.spec, horizon=40.0, steps=2000)

    def test_vanishing_exploration_matches_classical(self):
        tiny = self.spec.with_subpop(0, lambda_explore=1e-12)
        explore = simulate_representative(tiny, self.mf, SHORT, 8, counts=(16,))
        classical = simulate_representative(self.spec, self.mf, SHORT, 8, counts=(16,), mode="classical")
        gap = np.abs(empirical_cost(explore, tiny, 0, "original").values
                     - empirical_cost(classical, self.spec, 0, "original").values)
        self.assertLess(float(np.max(gap)), 1e-5)

    def test_zero_cost_game(self):
        spec = scalar_spec(A=-1.0, Q=0.0, D=0.3)
        batch = simulate_representative(spec, _solved(spec, horizon=2.0, steps=200), SHORT, 1, counts=(4,),
                                        mode="classical")
        assert_array_equal(empirical_cost(batch, spec, 0, "original").values, np.zeros(4))

    def test_regularized_subtracts_discounted_entropy(self):
        batch = simulate_representative(self.spec, self.mf, SHORT, 8, counts=(16,))
        explore = empirical_cost(batch, self.spec, 0, "exploratory")
        regular = empirical_cost(batch, self.spec, 0, "regularized")
        lam = self.spec.subpops[0].lambda_explore
        expected = -lam * policy_entropy(0, self.spec) * (1.0 - np.exp(-self.spec.rho)) / self.spec.rho
        assert_allclose(regular.values - explore.values, expected, atol=1e-12)
        self.assertAlmostEqual(discounted_length(SHORT, 0.0), 1.0)

    def test_regularized_needs_an_exploratory_batch(self):
        batch = simulate_representative(self.spec, self.mf, SHORT, 8, counts=(4,), mode="classical")
        with self.assertRaises(DegeneratePolicyError):
            empirical_cost(batch, self.spec, 0, "regularized")

    def test_short_horizon_is_flagged(self):
        batch = simulate_representative(self.spec, self.mf, SHORT, 8, counts=(16,))
        with self.assertRaisesMessage(HorizonTooShortError, "horizon too short for rho"):
            empirical_cost(batch, self.spec, 0, tol=1e-6)

    def test_tail_bound_covers_the_neglected_tail(self):
        short = TimeGrid(0.0, 10.0, 500)
        long = TimeGrid(0.0, 20.0, 1000)
        first = empirical_cost(simulate_representative(self.spec, self.mf, short, 6, counts=(200,)), self.spec, 0)
        second = empirical_cost(simulate_representative(self.spec, self.mf, long, 6, counts=(200,)), self.spec, 0)
        self.assertLess(abs(second.mean - first.mean), first.tail_bound)

    def test_agents_must_match_type(self):
        batch = simulate_representative(self.spec, self.mf, SHORT, 8, counts=(4,))
        with self.assertRaises(SpecError):
            empirical_cost(batch, self.spec, 0, agents=[])
        with self.assertRaises(SpecError):
            empirical_cost(batch, self.spec, 0, mode="median")


class GapExperimentTests(SimpleTestCase):
    grid = TimeGrid(0.0, 2.0, 200)

    def test_uncoupled_population_has_no_gap(self):
        spec = scalar_spec(x0=1.0, x0_var=0.25, D=0.3, lambda_explore=0.1)
        mf = _solved(spec, horizon=4.0, steps=400)
        result = coupling_gap_experiment(spec, mf, [4, 8, 16], 3, 17, grid=self.grid)
        self.assertEqual(result.summary["gaps"], [0.0, 0.0, 0.0])
        self.assertIsNone(result.summary["slope"])
        cost = cost_gap_experiment(spec, mf, [4, 8, 16], 3, 17, grid=self.grid)
        self.assertEqual(cost.summary["gaps"], [0.0, 0.0, 0.0])
        self.assertEqual(len(cost.rows), 3 * 4)

    def test_coupling_gap_decays_like_one_over_N(self):
        spec = coupled_spec()
        mf = _solved(spec, horizon=4.0, steps=400)
        result = coupling_gap_experiment(spec, mf, [4, 16, 64, 256], 96, 23, grid=self.grid)
        gaps = result.summary["gaps"]
        self.assertTrue(all(a > b for a, b in zip(gaps, gaps[1:])), gaps)
        self.assertTrue(-1.2 < result.summary["slope"] < -0.8, result.summary["slope"])

    def test_cost_gap_shrinks_with_N(self):
        spec = coupled_spec()
        mf = _solved(spec, horizon=4.0, steps=400)
        result = cost_gap_experiment(spec, mf, [8, 32, 128], 32, 29, grid=self.grid)
        gaps = result.summary["gaps"]
        self.assertGreater(gaps[0], gaps[1])
        self.assertGreater(gaps[1], gaps[2])
        self.assertLess(result.summary["slope"], 0.0)


class NashExperimentTests(SimpleTestCase):
    def test_optimal_family_has_zero_epsilon(self):
        spec = coupled_spec()
        mf = _solved(spec, horizon=4.0, steps=400)
        result = nash_deviation_experiment(spec, mf, [4], 2, 1, family=[OPTIMAL], grid=SHORT)
        self.assertEqual(result.summary["epsilons"], [0.0])

    def test_no_profitable_deviation_without_interaction(self):
        spec = scalar_spec(x0=1.0, lambda_explore=0.1)
        mf = _solved(spec, horizon=12.0, steps=1200)
        result = nash_deviation_experiment(spec, mf, [2], 2, 1, family=deviation_family(),
                                           grid=TimeGrid(0.0, 10.0, 500))
        self.assertEqual(result.summary["epsilons"], [0.0])

    def test_epsilon_shrinks_with_N(self):
        # H = -1 cancels each agent's own mean action in a population of one
        spec = scalar_spec(rho=0.5, x0=1.0, A=-1.0, H=-1.0, b=1.0, D=0.2, lambda_explore=0.1)
        mf = _solved(spec)
        result = nash_deviation_experiment(spec, mf, [1, 64], 4, 3, grid=TimeGrid(0.0, 10.0, 500))
        eps = result.summary["epsilons"]
        self.assertEqual(result.summary["family"], [d.label for d in deviation_family()])
        self.assertGreater(eps[0], 0.1)
        self.assertLess(eps[-1], eps[0])

    def test_empty_family(self):
        spec = coupled_spec()
        with self.assertRaises(SpecError):
            nash_deviation_experiment(spec, None, [4], 1, 1, family=[], grid=SHORT)


class ExplorationCostTests(SimpleTestCase):
    grid = TimeGrid(0.0, 10.0, 1000)

    def test_scalar_cost_of_exploration(self):
        spec = scalar_spec(rho=0.5, x0=1.0, D=0.3, lambda_explore=1.0)
        result = coe_experiment(spec, _solved(spec), 0, 2000, 31, grid=self.grid)
        summary = result.summary
        self.assertEqual(summary["analytic_coe"], 1.0)
        self.assertLess(abs(summary["estimate"] - 1.0), 3 * summary["std_err"] + 1e-3)

    def test_dimension_factor(self):
        spec = vector_spec(rho=0.1, lambda_explore=0.2)
        result = coe_experiment(spec, _solved(spec, steps=600), 0, 500, 31, grid=self.grid)
        self.assertAlmostEqual(result.summary["analytic_coe"], 2.0)
        self.assertLess(abs(result.summary["z_score"]), 4.0)

    def test_no_exploration_costs_nothing(self):
        spec = scalar_spec(rho=0.5, x0=1.0, D=0.3)
        result = coe_experiment(spec, _solved(spec), 0, 50, 31, grid=self.grid)
        self.assertEqual(result.summary["estimate"], 0.0)
        self.assertIsNone(result.summary["z_score"])


class LambdaSweepTests(SimpleTestCase):
    def test_gaps_and_spread_shrink(self):
        lambdas = settings.MFG_SIMULATION["lambdas"]
        result = lambda_sweep(scalar_spec(rho=0.5), 0, list(reversed(lambdas)), 5)
        summary = result.summary
        self.assertEqual(summary["lambdas"], [1.0, 0.1, 0.01, 1e-3, 1e-4, 1e-5, 1e-6])
        self.assertTrue(summary["monotone"])
        magnitudes = np.abs(summary["value_gaps"])
        self.assertTrue(np.all(np.diff(magnitudes) < 0), magnitudes)
        self.assertLess(magnitudes[-1], 1e-4)
        for lam, rms in zip(summary["lambdas"], summary["action_rms"]):
            self.assertLess(abs(rms / np.sqrt(lam) - 1.0), 0.03)
        self.assertLess(summary["action_rms"][-1], 1e-2)

    def test_needs_positive_lambdas(self):
        with self.assertRaises(SpecError):
            lambda_sweep(scalar_spec(), 0, [0.1, 0.0], 5)


class OptimalityCheckTests(SimpleTestCase):
    def test_every_deviation_costs_more(self):
        spec = scalar_spec(rho=0.5, x0=1.0, x0_var=0.25, D=0.3, lambda_explore=0.2)
        result = optimality_check(spec, _solved(spec), 0, 200, 13, grid=TimeGrid(0.0, 10.0, 500))
        self.assertEqual(len(result.rows), 8)
        self.assertTrue(result.summary["all_passed"], result.rows)


class ExperimentCommandTests(TestCase):
    def _spec_file(self, tmp):
        path = Path(tmp) / "spec.json"
        write_json(path, dump_spec(coupled_spec()))
        return path

    def test_reruns_are_byte_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._spec_file(tmp)
            texts = []
            for run in ("a", "b"):
                out = Path(tmp) / run
                call_command("experiment", "coupling-gap", str(path), out=str(out), Ns="4,8,16", reps=2,
                             sim_horizon=1.0, dt=0.05, horizon=5.0, steps=100, seed=99, stdout=StringIO())
                texts.append((out / "coupling-gap.csv").read_text())
            summary = read_json(Path(tmp) / "a" / "summary.json")
        self.assertEqual(texts[0], texts[1])
        self.assertTrue(texts[0].startswith("experiment,N,rep,checkpoint_t,value,std_err\n"))
        self.assertEqual(summary["kind"], "coupling-gap")

    def test_entropy_audit(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._spec_file(tmp)
            out = Path(tmp) / "audit"
            call_command("experiment", "entropy-audit", str(path), out=str(out), stdout=StringIO())
            summary = read_json(out / "summary.json")
        self.assertEqual(len(summary["types"]), 1)

    def test_type_out_of_range(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._spec_file(tmp)
            with self.assertRaises(CommandError) as ctx:
                call_command("experiment", "coe", str(path), k=3, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)

    def test_parse_list(self):
        self.assertEqual(parse_list("16, 64,256", int), [16, 64, 256])
        self.assertIsNone(parse_list(None))
