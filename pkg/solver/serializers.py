from rest_framework import serializers

from solver.meanfield import MeanFieldSolution


def _traj(traj):
    return traj.values.tolist()


class MeanFieldSolutionSerializer(serializers.BaseSerializer):
    """Read-only JSON view of a MeanFieldSolution: matrices plus trajectories sampled on the grid."""

    def to_representation(self, instance: MeanFieldSolution):
        grid = instance.grid
        data = {
            'label': instance.label,
            'grid': {'t0': grid.t0, 't1': grid.t1, 'steps': grid.steps, 'dt': grid.dt},
            'times': grid.times.tolist(),
            'finite_horizon': instance.finite_horizon,
            'Pi': [sol.to_dict() for sol in instance.Pi],
            's': [_traj(traj) for traj in instance.s],
            'J': instance.J.tolist(),
            'L': _traj(instance.L),
            'Abar': instance.Abar.tolist(),
            'mbar': _traj(instance.mbar),
            'xbar': _traj(instance.xbar),
            'mubar': _traj(instance.mubar),
            'residual': instance.residual,
            'iterations': instance.iterations,
        }
        if instance.finite_horizon:
            data['Pi_paths'] = [_traj(traj) for traj in instance.Pi_paths]
            data['J_path'] = _traj(instance.J_path)
        return data


class StabilitySerializer(serializers.BaseSerializer):
    def to_representation(self, instance):
        solution, checked_residual = instance
        reports = [report.to_dict() for report in solution.stability]
        return {
            'ok': all(r['ok'] for r in reports),
            'types': reports,
            'residual': solution.residual,
            'consistency_residual': checked_residual,
            'iterations': solution.iterations,
        }
