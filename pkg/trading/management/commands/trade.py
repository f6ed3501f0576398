import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand

from core.decorators import command_errors
from core.utils import prepare_run, read_json, save_run, write_csv, write_json
from simulation.simulator import standard_error
from solver.numerics import TimeGrid, derive_seed
from trading.learning import TRACE_COLUMNS, EpisodeConfig, rl_loop
from trading.market import (
    MeanFieldTradingPolicy, accounting_identity, plan, realized_cost, simulate_market,
)
from trading.serializers import LearningTraceSerializer, load_trading_document

MARKET_COLUMNS = ('episode', 't', 'F', 'q_mean', 'nubar', 'Z_mean')
MARTINGALE_SE = 4.0


class Command(BaseCommand):
    help = 'Simulate the execution market or run the model-based learning loop'

    def add_arguments(self, parser):
        parser.add_argument('kind', choices=['simulate', 'learn'])
        parser.add_argument('params', type=str, help='Path to the market parameters JSON')
        parser.add_argument('--out', type=str, help='Output directory')
        parser.add_argument('--seed', type=int, default=settings.MFG_SIMULATION['seed'])
        parser.add_argument('--traders', type=int, default=settings.MFG_TRADING['traders'])
        parser.add_argument('--episodes', type=int, default=settings.MFG_TRADING['episodes'])
        parser.add_argument('--steps', type=int, default=settings.MFG_TRADING['steps'])
        parser.add_argument('--iterations', type=int, default=settings.MFG_TRADING['iterations'])
        parser.add_argument('--fit-drift', action='store_true', dest='fit_drift',
                            help='Add a drift column to the impact regression')

    @command_errors
    def handle(self, *args, **options):
        market, init, lambda_explore = load_trading_document(read_json(options['params']))
        episodes = EpisodeConfig(traders=options['traders'], episodes=options['episodes'],
                                 steps=options['steps'])
        overrides = {key: options.get(key) for key in ('traders', 'episodes', 'steps', 'iterations', 'fit_drift')}
        out_dir, manifest = prepare_run('trade', options['params'], overrides, options['seed'],
                                        options.get('out'), kind=options['kind'])
        if options['kind'] == 'simulate':
            summary = self._simulate(market, lambda_explore, episodes, options['seed'], out_dir)
        else:
            summary = self._learn(market, init, lambda_explore, episodes, options, out_dir)
        save_run(manifest, 'ok' if summary.get('completed', True) else 'failed', summary)
        self.stdout.write(self.style.SUCCESS(f'Output: {out_dir}'))

    def _simulate(self, market, lambda_explore, episodes, seed, out_dir):
        self.stdout.write('Planning the execution game...')
        policy = MeanFieldTradingPolicy(plan(market, episodes.steps, lambda_explore=lambda_explore))
        grid = TimeGrid(0.0, market.T, episodes.steps)
        rows, costs, innovations, finals, identity_gap = [], [], [], [], 0.0
        for e in range(episodes.episodes):
            paths = simulate_market(market, policy, episodes.traders, grid, derive_seed(seed, e))
            costs.append(realized_cost(paths, market))
            innovations.append(paths.F[-1] - paths.F[0] - market.lambda_perm * grid.dt * paths.nubar.sum())
            finals.append(paths.q[-1])
            wealth, decomposition = accounting_identity(paths, market)
            identity_gap = max(identity_gap, float(np.max(np.abs(wealth - decomposition))))
            nubar = np.append(paths.nubar, np.nan)
            for j, t in enumerate(grid.times):
                rows.append((e, t, paths.F[j], paths.q[j].mean(), nubar[j], paths.Z[j].mean()))
        write_csv(out_dir / 'market.csv', MARKET_COLUMNS, rows)
        costs = np.concatenate(costs)
        innov_mean, innov_se = float(np.mean(innovations)), standard_error(innovations)
        summary = {
            'policy': policy.summary(),
            'cost_mean': float(costs.mean()),
            'cost_std_err': standard_error(costs),
            'midprice_innovation_mean': innov_mean,
            'midprice_innovation_std_err': innov_se,
            'martingale_ok': bool(abs(innov_mean) <= MARTINGALE_SE * innov_se) if innov_se > 0 else innov_mean == 0,
            'accounting_max_gap': identity_gap,
            'final_inventory_mean': float(np.mean(finals)),
        }
        write_json(out_dir / 'summary.json', summary)
        self.stdout.write(f"Mean realized cost: {summary['cost_mean']:.6g}")
        return summary

    def _learn(self, market, init, lambda_explore, episodes, options, out_dir):
        self.stdout.write(f"Running {options['iterations']} learning iterations...")
        trace = rl_loop(market, init, options['iterations'], episodes, lambda_explore, options['seed'],
                        fit_drift=options['fit_drift'])
        write_csv(out_dir / 'trace.csv', TRACE_COLUMNS, trace.to_rows())
        data = LearningTraceSerializer(trace).data
        write_json(out_dir / 'trace.json', data)
        if trace.failure:
            self.stdout.write(self.style.WARNING(f"Loop halted: {trace.failure['message']}"))
        return {'completed': trace.completed, 'failure': trace.failure,
                'final': trace.records[-1].to_dict(), 'truth': market.to_dict()}
