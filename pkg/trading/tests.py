import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase
from numpy.testing import assert_allclose, assert_array_equal

from core.exceptions import ParameterUnidentifiableError, SpecError
from core.utils import write_json
from games.specs import validate_spec
from solver.numerics import TimeGrid
from trading.learning import EpisodeConfig, MarketDataset, estimate_params, rl_loop
from trading.market import (
    ConstantRatePolicy, MarketParams, MeanFieldTradingPolicy, accounting_identity, plan, realized_cost,
    simulate_market, to_lqg,
)
from trading.serializers import load_trading_document

MARKET = MarketParams(sigma=0.1, lambda_perm=0.05, a_temp=0.02, phi_urgency=0.5, psi_terminal=5.0, T=1.0)


class MarketParamsTests(SimpleTestCase):
    def test_validation(self):
        with self.assertRaises(SpecError):
            MARKET.replace(sigma=0.0)
        with self.assertRaises(SpecError):
            MARKET.replace(a_temp=-0.1)
        self.assertEqual(MARKET.replace(lambda_perm=0.0).lambda_perm, 0.0)

    def test_document(self):
        market, init, lam = load_trading_document({
            "market": MARKET.to_dict(), "init": {"lambda_perm": 0.0}, "lambda_explore": 0.1})
        self.assertEqual(market, MARKET)
        self.assertEqual(init.lambda_perm, 0.0)
        self.assertEqual(init.a_temp, MARKET.a_temp)
        self.assertEqual(lam, 0.1)

    def test_malformed_document(self):
        with self.assertRaises(SpecError):
            load_trading_document({"market": {"sigma": -1.0}})


class LQGMappingTests(SimpleTestCase):
    def test_structure(self):
        spec, terminal = to_lqg(MARKET, lambda_explore=0.1)
        p = spec.subpops[0]
        assert_array_equal(p.B, [[1.0], [0.0]])
        assert_array_equal(p.H, [[0.0], [0.05]])
        assert_array_equal(p.D, [[0.0], [0.1]])
        assert_array_equal(p.S, [[0.02], [1.0]])
        assert_array_equal(p.R, [[0.1]])
        assert_array_equal(p.nvec, [-0.02])
        assert_array_equal(terminal.Pi_T[0], [[10.0, -1.0], [-1.0, 0.0]])
        self.assertEqual(spec.rho, 0.0)
        self.assertFalse(validate_spec(spec).ok)

    def test_several_trader_types(self):
        spec, terminal = to_lqg(MARKET, N_types=2)
        assert_allclose(spec.pi, [0.5, 0.5])
        self.assertEqual(len(terminal.Pi_T), 2)


class PlanningTests(SimpleTestCase):
    def test_riccati_keeps_book_value_entries(self):
        mf = plan(MARKET, 400)
        P = mf.Pi_paths[0].values
        assert_array_equal(P[:, 0, 1], -1.0)
        assert_array_equal(P[:, 1, 1], 0.0)
        kappa, a, phi = MARKET.kappa_rate, MARKET.a_temp, MARKET.phi_urgency
        k, omega = np.sqrt(phi * kappa), np.sqrt(phi / kappa)
        yT = 2.0 * MARKET.psi_terminal + a
        tau = MARKET.T - mf.grid.times
        expected = k / np.tanh(omega * tau + 0.5 * np.log((yT + k) / (yT - k))) - a
        assert_allclose(P[:, 0, 0], expected, rtol=1e-3)

    def test_terminal_penalty_liquidates(self):
        params = MARKET.replace(phi_urgency=0.0)
        policy = MeanFieldTradingPolicy(plan(params, 400))
        paths = simulate_market(params, policy, 50, TimeGrid(0.0, 1.0, 400), 3)
        self.assertLess(abs(paths.q[-1].mean()), 0.05)
        self.assertLess(policy.inventory_gain(), 0.0)

    def test_exploration_noise(self):
        policy = MeanFieldTradingPolicy(plan(MARKET, 200, lambda_explore=0.1))
        self.assertAlmostEqual(policy.noise_std, 1.0)


class MarketSimulationTests(SimpleTestCase):
    grid = TimeGrid(0.0, 1.0, 200)

    def test_constant_rate_moves_price_linearly(self):
        params = MARKET.replace(sigma=1e-300)
        paths = simulate_market(params, ConstantRatePolicy(-1.0), 5, self.grid, 1)
        self.assertAlmostEqual(paths.F[-1], params.F0 - params.lambda_perm * params.T, places=10)
        assert_allclose(paths.q[-1], 0.0, atol=1e-12)
        idle = simulate_market(params.replace(lambda_perm=0.0), ConstantRatePolicy(-1.0), 5, self.grid, 1)
        assert_array_equal(idle.F, params.F0)

    def test_accounting_identity(self):
        policy = MeanFieldTradingPolicy(plan(MARKET, 200, lambda_explore=0.1))
        paths = simulate_market(MARKET, policy, 20, self.grid, 8)
        wealth, decomposition = accounting_identity(paths, MARKET)
        self.assertLess(float(np.max(np.abs(wealth - decomposition))), 1e-9)

    def test_realized_cost_without_impact(self):
        params = MARKET.replace(sigma=1e-300, lambda_perm=0.0, a_temp=0.0, phi_urgency=0.0)
        paths = simulate_market(params, ConstantRatePolicy.liquidation(params), 3, self.grid, 1)
        assert_allclose(realized_cost(paths, params), -params.F0 * params.q0, atol=1e-9)

    def test_seeded_paths_repeat(self):
        policy = ConstantRatePolicy.liquidation(MARKET, noise_std=1.0)
        first = simulate_market(MARKET, policy, 4, self.grid, 12)
        second = simulate_market(MARKET, policy, 4, self.grid, 12)
        assert_array_equal(first.F, second.F)
        assert_array_equal(first.nu, second.nu)


class EstimationTests(SimpleTestCase):
    grid = TimeGrid(0.0, 1.0, 200)

    def _data(self, params, policy, episodes=5, traders=20):
        data = MarketDataset()
        for e in range(episodes):
            data.extend(simulate_market(params, policy, traders, self.grid, 100 + e), params)
        return data

    def test_noise_free_recovery(self):
        params = MARKET.replace(sigma=1e-300, F0=0.0)
        est = estimate_params(self._data(params, ConstantRatePolicy(-1.0), episodes=2))
        self.assertAlmostEqual(est.lambda_perm, params.lambda_perm, places=10)
        self.assertAlmostEqual(est.a_temp, params.a_temp, places=10)

    def test_estimates_within_standard_errors(self):
        data = self._data(MARKET, ConstantRatePolicy.liquidation(MARKET, noise_std=1.0))
        est = estimate_params(data)
        self.assertEqual(est.n_rows, 5 * 200)
        self.assertLess(abs(est.lambda_perm - MARKET.lambda_perm), 3 * est.se_lambda)
        self.assertLess(abs(est.sigma - MARKET.sigma), 3 * est.se_sigma)
        self.assertAlmostEqual(est.a_temp, MARKET.a_temp, places=10)
        self.assertIsNone(est.drift)

    def test_idle_traders_are_unidentifiable(self):
        with self.assertRaises(ParameterUnidentifiableError) as ctx:
            estimate_params(self._data(MARKET, ConstantRatePolicy(0.0), episodes=1))
        self.assertEqual(ctx.exception.params, ("lambda_perm",))

    def test_constant_rate_with_drift_column_is_collinear(self):
        data = self._data(MARKET, ConstantRatePolicy.liquidation(MARKET), episodes=2)
        self.assertIsNotNone(estimate_params(data).lambda_perm)
        with self.assertRaises(ParameterUnidentifiableError):
            estimate_params(data, fit_drift=True)


class LearningLoopTests(SimpleTestCase):
    episodes = EpisodeConfig(traders=10, episodes=5, steps=200)

    def test_dataset_grows_every_iteration(self):
        trace = rl_loop(MARKET, MARKET, 2, self.episodes, 0.1, 5)
        self.assertTrue(trace.completed)
        self.assertEqual(trace.dataset_sizes(), [1000, 2000, 3000])
        self.assertEqual([r.phase for r in trace.records], ["initialization", "acting", "acting"])

    def test_true_initialization_keeps_the_true_policy(self):
        trace = rl_loop(MARKET, MARKET, 1, self.episodes, 0.1, 5)
        truth = MeanFieldTradingPolicy(plan(MARKET, 200, lambda_explore=0.1)).inventory_gain()
        self.assertLess(abs(trace.records[-1].inventory_gain / truth - 1.0), 0.01)

    def test_learns_permanent_impact_from_zero(self):
        episodes = EpisodeConfig(traders=10, episodes=10, steps=200)
        trace = rl_loop(MARKET, MARKET.replace(lambda_perm=0.0), 3, episodes, 0.1, 7)
        self.assertTrue(trace.completed)
        errors = [abs(r.lambda_hat - MARKET.lambda_perm) for r in trace.records]
        last = trace.records[-1]
        self.assertLess(errors[-1], 3 * last.se_lambda)
        self.assertLessEqual(errors[-1], errors[0])
        self.assertEqual(trace.dataset_sizes()[-1], 4 * 2000)

    def test_no_exploration_halts_with_drift_column(self):
        trace = rl_loop(MARKET, MARKET, 2, self.episodes, 0.0, 5, fit_drift=True)
        self.assertFalse(trace.completed)
        self.assertEqual(trace.failure["iteration"], 1)
        self.assertEqual(trace.failure["code"], "parameter_unidentifiable")
        self.assertEqual(len(trace.records), 1)

    def test_episode_config_validation(self):
        with self.assertRaises(SpecError):
            EpisodeConfig(traders=0)


class TradeCommandTests(TestCase):
    def _params(self, tmp, document):
        path = Path(tmp) / "market.json"
        write_json(path, document)
        return path

    def _document(self):
        return {"market": MARKET.to_dict(), "init": {"lambda_perm": 0.0}, "lambda_explore": 0.1}

    def test_simulate(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._params(tmp, self._document())
            out = Path(tmp) / "sim"
            call_command("trade", "simulate", str(path), out=str(out), traders=10, episodes=20, steps=200,
                         seed=4, stdout=StringIO())
            summary = json.loads((out / "summary.json").read_text())
            header = (out / "market.csv").read_text().splitlines()[0]
        self.assertEqual(header, "episode,t,F,q_mean,nubar,Z_mean")
        self.assertLess(summary["accounting_max_gap"], 1e-9)
        self.assertTrue(summary["martingale_ok"])
        self.assertLess(abs(summary["final_inventory_mean"]), 0.1)

    def test_learn(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._params(tmp, self._document())
            out = Path(tmp) / "learn"
            call_command("trade", "learn", str(path), out=str(out), traders=5, episodes=2, steps=200,
                         iterations=1, seed=4, stdout=StringIO())
            trace = json.loads((out / "trace.json").read_text())
            self.assertTrue((out / "trace.csv").exists())
        self.assertTrue(trace["completed"])
        self.assertEqual(trace["dataset_sizes"], [400, 800])

    def test_malformed_parameters_exit_one(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._params(tmp, {"market": {"sigma": 0.1}})
            with self.assertRaises(CommandError) as ctx:
                call_command("trade", "simulate", str(path), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)
