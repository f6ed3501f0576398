"""Monte Carlo experiments on the solved equilibrium: coupling and cost gaps with
their rates, epsilon-Nash deviations, cost of exploration, the vanishing
exploration sweep and an optimality spot check."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from core.exceptions import NumericalError, SpecError
from games.specs import PopulationSpec, exact_counts
from policies.policy import analytic_coe, value_gap, value_gap_standard
from policies.variational import entropy_audit
from simulation.simulator import (
    OPTIMAL, Deviation, SimConfig, deviation_family, discounted_length, empirical_cost,
    simulate_population, simulate_representative, standard_error,
)
from solver.meanfield import MeanFieldSolution
from solver.numerics import TimeGrid, derive_seed, fit_rate, sample_gaussian

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("experiment", "N", "rep", "checkpoint_t", "value", "std_err")
SUMMARY_REP = "mean"
OPTIMALITY_MARGIN = 3.0
DEFAULT_SIM_HORIZON = 10.0
DEFAULT_SIM_DT = 0.01


@dataclass
class ExperimentResult:
    kind: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    header: tuple = CSV_COLUMNS


def default_grid(mf: MeanFieldSolution, horizon=DEFAULT_SIM_HORIZON, dt=DEFAULT_SIM_DT):
    return TimeGrid.from_dt(min(horizon, mf.grid.horizon), dt)


def _progress(iterable, progress, desc):
    return tqdm(iterable, desc=desc, disable=not progress, leave=False)


def _rate(Ns, values):
    try:
        return fit_rate(Ns, values)
    except NumericalError:
        logger.info("gap statistics not all positive; rate fit skipped")
        return None


def _row(kind, N, rep, t, value, std_err=""):
    return {"experiment": kind, "N": N, "rep": rep, "checkpoint_t": t, "value": value, "std_err": std_err}


def _first_agent_type(counts):
    return int(np.flatnonzero(np.asarray(counts) > 0)[0])


def coupling_gap_experiment(spec: PopulationSpec, mf: MeanFieldSolution, Ns, reps, seed, grid=None,
                            checkpoint=None, mode="exploratory", progress=False) -> ExperimentResult:
    """Mean over agents of ||x_i^N - x_i^inf||^2 at the checkpoint, the finite and
    limiting systems sharing every agent's random stream."""
    grid = grid or default_grid(mf)
    t_check = grid.t0 + 0.5 * grid.horizon if checkpoint is None else float(checkpoint)
    record = (t_check,)
    result = ExperimentResult("coupling-gap")
    gaps, errs = [], []
    for N in Ns:
        counts = exact_counts(spec.pi, N)
        values = []
        for rep in _progress(range(reps), progress, f"coupling gap N={N}"):
            rep_seed = derive_seed(seed, N, rep)
            config = SimConfig(counts=counts, grid=grid, seed=rep_seed, mode=mode, record=record)
            finite = simulate_population(spec, mf, config)
            limit = simulate_representative(spec, mf, grid, rep_seed, counts=counts, mode=mode, record=record)
            gap = float(np.mean(np.sum((finite.states[0] - limit.states[0]) ** 2, axis=1)))
            values.append(gap)
            result.rows.append(_row(result.kind, N, rep, t_check, gap))
        gaps.append(float(np.mean(values)))
        errs.append(standard_error(values))
        result.rows.append(_row(result.kind, N, SUMMARY_REP, t_check, gaps[-1], errs[-1]))
        logger.info("coupling gap N=%d: %.4e (se %.2e)", N, gaps[-1], errs[-1])
    result.summary = {"Ns": list(Ns), "gaps": gaps, "std_errs": errs, "slope": _rate(Ns, gaps),
                      "checkpoint_t": t_check, "reps": reps, "mode": mode}
    return result


def cost_gap_experiment(spec: PopulationSpec, mf: MeanFieldSolution, Ns, reps, seed, grid=None,
                        deviation: Deviation = Deviation(mean_shift=0.5), cost_mode="exploratory",
                        progress=False) -> ExperimentResult:
    """Mean over reps of |J_0^N - J_0^inf| for agent 0 playing the deviation while
    everyone else plays the optimal policy."""
    grid = grid or default_grid(mf)
    result = ExperimentResult("cost-gap")
    gaps, errs = [], []
    for N in Ns:
        counts = exact_counts(spec.pi, N)
        k = _first_agent_type(counts)
        single = np.eye(spec.K, dtype=int)[k]
        values = []
        for rep in _progress(range(reps), progress, f"cost gap N={N}"):
            rep_seed = derive_seed(seed, N, rep)
            config = SimConfig(counts=counts, grid=grid, seed=rep_seed, record=(grid.t1,))
            finite = simulate_population(spec, mf, config, deviation=deviation)
            limit = simulate_representative(spec, mf, grid, rep_seed, counts=single,
                                            deviation=deviation, record=(grid.t1,))
            J_finite = empirical_cost(finite, spec, k, cost_mode, agents=[0]).mean
            J_limit = empirical_cost(limit, spec, k, cost_mode, agents=[0]).mean
            gap = abs(J_finite - J_limit)
            values.append(gap)
            result.rows.append(_row(result.kind, N, rep, grid.t1, gap))
        gaps.append(float(np.mean(values)))
        errs.append(standard_error(values))
        result.rows.append(_row(result.kind, N, SUMMARY_REP, grid.t1, gaps[-1], errs[-1]))
        logger.info("cost gap N=%d: %.4e (se %.2e)", N, gaps[-1], errs[-1])
    result.summary = {"Ns": list(Ns), "gaps": gaps, "std_errs": errs, "slope": _rate(Ns, gaps),
                      "deviation": deviation.label, "cost_mode": cost_mode, "reps": reps}
    return result


def nash_deviation_experiment(spec: PopulationSpec, mf: MeanFieldSolution, Ns, reps, seed,
                              family=None, grid=None, cost_mode="regularized",
                              progress=False) -> ExperimentResult:
    """eps = max(0, J^N(optimal) - min over the family of J^N(deviation)) for agent 0,
    all deviations evaluated on the optimal run's random numbers."""
    grid = grid or default_grid(mf)
    family = list(family) if family is not None else deviation_family()
    if not family:
        raise SpecError("deviation family is empty")
    Ns = [Ns] if np.isscalar(Ns) else list(Ns)
    result = ExperimentResult("nash")
    epsilons = []
    for N in Ns:
        counts = exact_counts(spec.pi, N)
        k = _first_agent_type(counts)
        star = np.empty(reps)
        dev = np.empty((len(family), reps))
        for rep in _progress(range(reps), progress, f"nash N={N}"):
            rep_seed = derive_seed(seed, N, rep)
            config = SimConfig(counts=counts, grid=grid, seed=rep_seed, record=(grid.t1,))

            def cost(deviation):
                batch = simulate_population(spec, mf, config, deviation=deviation)
                return empirical_cost(batch, spec, k, cost_mode, agents=[0], mf=mf, include_tail=True).mean

            star[rep] = cost(OPTIMAL)
            for i, member in enumerate(family):
                dev[i, rep] = star[rep] if member.is_identity else cost(member)
        best = int(np.argmin(dev.mean(axis=1)))
        eps = max(0.0, float(star.mean() - dev[best].mean()))
        err = standard_error(star - dev[best])
        epsilons.append(eps)
        result.rows.append(_row(result.kind, N, SUMMARY_REP, grid.t1, eps, err))
        logger.info("nash N=%d: eps %.4e (best %s)", N, eps, family[best].label)
    result.summary = {"Ns": Ns, "epsilons": epsilons, "family": [d.label for d in family],
                      "cost_mode": cost_mode, "reps": reps}
    return result


def coe_experiment(spec: PopulationSpec, mf: MeanFieldSolution, k, reps, seed, grid=None) -> ExperimentResult:
    """Original cost of sampled actions minus that of the classical control, same
    Brownian paths, plus the closed-form discounted tail beyond the horizon."""
    grid = grid or default_grid(mf)
    expected = analytic_coe(k, spec)
    counts = np.zeros(spec.K, dtype=int)
    counts[k] = reps
    record = (grid.t1,)
    explore = simulate_representative(spec, mf, grid, seed, counts=counts, mode="exploratory", record=record)
    classical = simulate_representative(spec, mf, grid, seed, counts=counts, mode="classical", record=record)
    diff = (empirical_cost(explore, spec, k, "original").values
            - empirical_cost(classical, spec, k, "original").values)
    p = spec.subpops[k]
    rate = 0.5 * p.m * p.lambda_explore
    tail = rate * np.exp(-spec.rho * grid.t1) / spec.rho
    truncated = float(np.mean(diff))
    estimate = truncated + tail
    err = standard_error(diff)
    result = ExperimentResult("coe")
    result.rows.append(_row(result.kind, reps, SUMMARY_REP, grid.t1, estimate, err))
    result.summary = {
        "k": k,
        "estimate": estimate,
        "std_err": err,
        "truncated_estimate": truncated,
        "truncated_expected": rate * discounted_length(grid, spec.rho),
        "analytic_coe": expected,
        "z_score": (estimate - expected) / err if err > 0 else None,
        "lambda_explore": p.lambda_explore,
        "rho": spec.rho,
        "m": p.m,
        "reps": reps,
    }
    logger.info("cost of exploration: %.6g (se %.2e), analytic %.6g", estimate, err, expected)
    return result


LAMBDA_COLUMNS = ("lambda", "value_gap", "value_gap_standard", "analytic_coe", "action_rms")


def lambda_sweep(spec: PopulationSpec, k, lambdas, seed, samples=10000) -> ExperimentResult:
    """Value gaps, cost of exploration and sampled action spread as lambda shrinks.

    The policy mean does not depend on lambda, so action minus mean is sampled
    directly from N(0, lambda R^-1).
    """
    lambdas = sorted((float(lam) for lam in lambdas), reverse=True)
    if not lambdas or lambdas[-1] <= 0:
        raise SpecError("lambda sweep needs positive lambdas")
    result = ExperimentResult("lambda-sweep", header=LAMBDA_COLUMNS)
    gaps, rms = [], []
    for i, lam in enumerate(lambdas):
        swept = spec.with_subpop(k, lambda_explore=lam)
        p = swept.subpops[k]
        rng = np.random.default_rng(derive_seed(seed, i))
        spread = sample_gaussian(np.zeros(p.m), p.exploration_cov, rng, size=samples)
        rms.append(float(np.sqrt(np.mean(np.sum(spread ** 2, axis=1)))))
        gaps.append(value_gap(k, swept))
        result.rows.append({
            "lambda": lam,
            "value_gap": gaps[-1],
            "value_gap_standard": value_gap_standard(k, swept),
            "analytic_coe": analytic_coe(k, swept),
            "action_rms": rms[-1],
        })
    magnitudes = np.abs(gaps)
    result.summary = {
        "lambdas": lambdas,
        "value_gaps": gaps,
        "action_rms": rms,
        "monotone": bool(np.all(np.diff(magnitudes) < 0)),
        "samples": samples,
    }
    return result


AUDIT_COLUMNS = ("k", "lambda_explore", "entropy_closed_form", "entropy_quadrature",
                 "discounted_standard", "discounted_display", "discounted_quadrature",
                 "discrepancy", "value_gap", "value_gap_standard")


def entropy_audit_experiment(spec: PopulationSpec, nodes=401) -> ExperimentResult:
    result = ExperimentResult("entropy-audit", header=AUDIT_COLUMNS)
    for k in range(spec.K):
        result.rows.append(entropy_audit(k, spec, nodes=nodes).to_dict())
    result.summary = {"types": result.rows, "nodes": nodes}
    return result


OPTIMALITY_COLUMNS = ("member", "mean_shift", "cov_scale", "cost_diff", "std_err", "margin", "passed")


def optimality_check(spec: PopulationSpec, mf: MeanFieldSolution, k, reps, seed, grid=None,
                     family=None) -> ExperimentResult:
    """Regularized cost of each deviation minus the optimal one, paired on common
    random numbers under the limiting field; passes when the mean difference
    exceeds three standard errors."""
    grid = grid or default_grid(mf)
    family = list(family) if family is not None else deviation_family()
    counts = np.zeros(spec.K, dtype=int)
    counts[k] = reps
    record = (grid.t1,)

    def costs(deviation):
        batch = simulate_representative(spec, mf, grid, seed, counts=counts, deviation=deviation,
                                        deviate_all=True, record=record)
        return empirical_cost(batch, spec, k, "regularized", mf=mf, include_tail=True).values

    star = costs(None)
    result = ExperimentResult("optimality", header=OPTIMALITY_COLUMNS)
    for i, member in enumerate(family):
        diff = costs(member) - star
        mean, err = float(np.mean(diff)), standard_error(diff)
        margin = mean / err if err > 0 else (float("inf") if mean > 0 else 0.0)
        result.rows.append({
            "member": i,
            "mean_shift": float(np.asarray(member.mean_shift).ravel()[0]),
            "cov_scale": member.cov_scale,
            "cost_diff": mean,
            "std_err": err,
            "margin": margin,
            "passed": margin > OPTIMALITY_MARGIN,
        })
    result.summary = {
        "optimal_cost": float(np.mean(star)),
        "optimal_std_err": standard_error(star),
        "all_passed": all(row["passed"] for row in result.rows),
        "family": [d.label for d in family],
        "reps": reps,
    }
    return result
