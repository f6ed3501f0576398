from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from core.decorators import command_errors
from core.utils import prepare_run, read_json, save_run
from games.serializers import load_spec
from games.specs import validate_spec
from simulation.experiments import (
    coe_experiment, cost_gap_experiment, coupling_gap_experiment, entropy_audit_experiment,
    lambda_sweep, nash_deviation_experiment, optimality_check,
)
from simulation.simulator import OPTIMAL
from simulation.utils import parse_list, write_result
from solver.management.commands.solve import add_solver_arguments, solver_config_from_options
from solver.meanfield import solve_consistency
from solver.numerics import TimeGrid

KINDS = ('coupling-gap', 'cost-gap', 'nash', 'coe', 'lambda-sweep', 'entropy-audit', 'optimality')
NEEDS_SOLUTION = ('coupling-gap', 'cost-gap', 'nash', 'coe', 'optimality')


class Command(BaseCommand):
    help = 'Run a Monte Carlo or quadrature experiment on a population spec'

    def add_arguments(self, parser):
        parser.add_argument('kind', choices=KINDS)
        parser.add_argument('spec', type=str, help='Path to the population spec JSON')
        parser.add_argument('--out', type=str, help='Output directory')
        parser.add_argument('--seed', type=int, default=settings.MFG_SIMULATION['seed'])
        parser.add_argument('--reps', type=int, default=settings.MFG_SIMULATION['reps'])
        parser.add_argument('--Ns', type=str, help='Comma list of population sizes')
        parser.add_argument('--sim-horizon', type=float, dest='sim_horizon',
                            default=settings.MFG_SIMULATION['horizon'], help='Simulation horizon')
        parser.add_argument('--dt', type=float, default=settings.MFG_SIMULATION['dt'], help='Simulation step')
        parser.add_argument('--lambda-list', type=str, dest='lambda_list', help='Comma list of lambdas')
        parser.add_argument('--type', type=int, dest='k', default=0, help='Type index (0-based)')
        parser.add_argument('--family', choices=['default', 'optimal'], default='default',
                            help='Deviation family for nash')
        parser.add_argument('--progress', action='store_true', help='Show progress bars')
        add_solver_arguments(parser)

    @command_errors
    def handle(self, *args, **options):
        kind = options['kind']
        spec_path = options['spec']
        spec = load_spec(read_json(spec_path))
        validate_spec(spec).raise_for_violations()
        if not 0 <= options['k'] < spec.K:
            raise CommandError(f"type index {options['k']} out of range for K={spec.K}", returncode=1)
        overrides = {key: options.get(key) for key in (
            'reps', 'Ns', 'sim_horizon', 'dt', 'lambda_list', 'k', 'family',
            'steps', 'horizon', 'tol', 'damping', 'max_iters')}
        out_dir, manifest = prepare_run('experiment', spec_path, overrides, options['seed'],
                                        options.get('out'), kind=kind)

        self.stdout.write(f'Running {kind} experiment...')
        result = self._run(kind, spec, options)
        csv_path = write_result(result, out_dir)
        save_run(manifest, 'ok', result.summary)
        self.stdout.write(self.style.SUCCESS(f'Wrote {csv_path}\nOutput: {out_dir}'))

    def _run(self, kind, spec, options):
        seed, reps, k = options['seed'], options['reps'], options['k']
        progress = options.get('progress', False)
        if kind == 'lambda-sweep':
            lambdas = parse_list(options.get('lambda_list')) or settings.MFG_SIMULATION['lambdas']
            return lambda_sweep(spec, k, lambdas, seed)
        if kind == 'entropy-audit':
            return entropy_audit_experiment(spec)

        mf = solve_consistency(spec, solver_config_from_options(options))
        horizon = min(options['sim_horizon'], mf.grid.horizon)
        grid = TimeGrid.from_dt(horizon, options['dt'])
        Ns = parse_list(options.get('Ns'), int) or settings.MFG_SIMULATION['Ns']
        if kind == 'coupling-gap':
            return coupling_gap_experiment(spec, mf, Ns, reps, seed, grid=grid, progress=progress)
        if kind == 'cost-gap':
            return cost_gap_experiment(spec, mf, Ns, reps, seed, grid=grid, progress=progress)
        if kind == 'nash':
            family = [OPTIMAL] if options['family'] == 'optimal' else None
            return nash_deviation_experiment(spec, mf, Ns, reps, seed, family=family, grid=grid,
                                             progress=progress)
        if kind == 'coe':
            return coe_experiment(spec, mf, k, reps, seed, grid=grid)
        return optimality_check(spec, mf, k, reps, seed, grid=grid)
