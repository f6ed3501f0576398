"""Finite-population and representative-agent simulation under the solved
mean field policy, and discounted empirical costs.

Drift always uses the policy means; sampled actions only enter the costs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import DegeneratePolicyError, HorizonTooShortError, NumericalError, SpecError
from games.specs import PopulationSpec, mixture_weights
from policies.policy import classical_control, policy_entropy
from solver.meanfield import MeanFieldSolution
from solver.numerics import TimeGrid, Trajectory, agent_rng, derive_seed, discount_weights, psd_factor

logger = logging.getLogger(__name__)

MODES = ("classical", "exploratory")
COUPLINGS = ("crn", "independent")
COST_MODES = ("original", "exploratory", "regularized")
BLOCK = 256
LATE_WINDOW = 0.1


@dataclass(frozen=True)
class Deviation:
    """Mean-shifted, covariance-scaled variant of the optimal Gaussian policy."""

    mean_shift: float = 0.0
    cov_scale: float = 1.0

    def __post_init__(self):
        if not self.cov_scale > 0:
            raise SpecError("covariance scale must be positive")

    @property
    def is_identity(self):
        return not np.any(self.mean_shift) and self.cov_scale == 1.0

    @property
    def label(self):
        return f"shift={np.asarray(self.mean_shift).tolist()},scale={self.cov_scale:g}"


OPTIMAL = Deviation()


def deviation_family():
    """Mean shifts of +-0.5 and +-1, covariance scalings 0.25, 0.5, 2 and 4."""
    return (
        [Deviation(mean_shift=d) for d in (-1.0, -0.5, 0.5, 1.0)]
        + [Deviation(cov_scale=c) for c in (0.25, 0.5, 2.0, 4.0)]
    )


@dataclass(frozen=True)
class SimConfig:
    counts: tuple
    grid: TimeGrid
    seed: int
    mode: str = "exploratory"
    coupling: str = "crn"
    record: tuple | None = None
    keep_increments: bool = False

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if any(c < 0 for c in counts) or sum(counts) == 0:
            raise SpecError("agent counts must be nonnegative with a positive total")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "seed", int(self.seed))
        if self.mode not in MODES:
            raise SpecError(f"unknown simulation mode {self.mode!r}")
        if self.coupling not in COUPLINGS:
            raise SpecError(f"unknown coupling {self.coupling!r}")
        if self.record is not None:
            object.__setattr__(self, "record", tuple(float(t) for t in self.record))

    @property
    def N(self):
        return sum(self.counts)

    def types(self):
        return np.repeat(np.arange(len(self.counts)), self.counts)

    def record_indices(self):
        if self.record is None:
            return np.arange(self.grid.steps + 1)
        return np.array([self.grid.index(t) for t in self.record], dtype=int)


class NoiseBank:
    """Per-agent random streams seeded seed ^ index: the initial-state draw first,
    then blocks of Brownian increments and action noise, node by node."""

    def __init__(self, seed, N, n, r, m, dt):
        self.rngs = [agent_rng(seed, i) for i in range(N)]
        self.r, self.m = r, m
        self.sqrt_dt = np.sqrt(dt)
        self.x0 = np.stack([rng.standard_normal(n) for rng in self.rngs])
        self._block = -1
        self._dW = self._z = None

    def at(self, j):
        block, offset = divmod(j, BLOCK)
        if block != self._block:
            if block != self._block + 1:
                raise SpecError("noise must be drawn in node order")
            draws = np.stack([rng.standard_normal((BLOCK, self.r + self.m)) for rng in self.rngs], axis=1)
            self._dW = draws[..., :self.r] * self.sqrt_dt
            self._z = draws[..., self.r:]
            self._block = block
        return self._dW[offset], self._z[offset]


@dataclass(frozen=True)
class SimulationBatch:
    config: SimConfig
    limit_field: bool
    types: np.ndarray
    record_times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    means: np.ndarray
    xbar: Trajectory
    mubar: Trajectory
    running: dict
    final_states: np.ndarray
    entropies: np.ndarray
    seed: int
    increments: np.ndarray | None = None
    deviated: tuple = field(default_factory=tuple)

    @property
    def N(self):
        return self.types.size

    def agents_of(self, k):
        return np.flatnonzero(self.types == k)

    def recomputed_averages(self):
        """Stacked per-type means of the recorded states."""
        K = len(self.config.counts)
        return np.stack([_type_means(self.states[i], self.types, K) for i in range(self.states.shape[0])])


def _type_means(values, types, K):
    out = []
    for k in range(K):
        idx = types == k
        out.append(values[idx].mean(axis=0) if np.any(idx) else np.zeros(values.shape[1]))
    return np.concatenate(out)


def _running_cost(p, dev, u):
    """(1/2) dev^T Q dev + eta^T dev + dev^T S u + n^T u + (1/2) u^T R u, row-wise."""
    return (
        0.5 * np.einsum('ij,jk,ik->i', dev, p.Q, dev)
        + dev @ p.eta
        + np.einsum('ij,jk,ik->i', dev, p.S, u)
        + u @ p.nvec
        + 0.5 * np.einsum('ij,jk,ik->i', u, p.R, u)
    )


def _simulate(spec: PopulationSpec, mf: MeanFieldSolution, config: SimConfig, limit_field,
              deviation=None, deviate_all=False) -> SimulationBatch:
    if len(config.counts) != spec.K:
        raise SpecError(f"expected {spec.K} agent counts, got {len(config.counts)}")
    grid = config.grid
    mf.grid.check([grid.t0, grid.t1])
    n, m, r, K = spec.n, spec.m, spec.r, spec.K
    N, dt, times = config.N, grid.dt, grid.times
    types = config.types()
    groups = [np.flatnonzero(types == k) for k in range(K)]
    seed = config.seed
    if limit_field and config.coupling == "independent":
        seed = derive_seed(config.seed, 1)
    bank = NoiseBank(seed, N, n, r, m, dt)
    x = spec.x0_mean + bank.x0 @ psd_factor(spec.x0_cov).T

    shift = np.zeros((N, m))
    scale = np.ones(N)
    deviated = ()
    if deviation is not None and not deviation.is_identity:
        deviated = tuple(range(N)) if deviate_all else (0,)
        shift[list(deviated)] = np.broadcast_to(np.asarray(deviation.mean_shift, dtype=float), (m,))
        scale[list(deviated)] = deviation.cov_scale

    weights = spec.pi if limit_field else mixture_weights(config.counts)
    expand = lambda block: np.kron(weights[None, :], block)
    coupling = [(expand(p.F), expand(p.H), expand(p.psi)) for p in spec.subpops]
    factors = [psd_factor(p.exploration_cov) for p in spec.subpops]
    drift_offset = [p.b.sample(times) for p in spec.subpops]
    explore = config.mode == "exploratory"

    lam = np.array([spec.subpops[k].lambda_explore for k in types])
    quad_extra = 0.5 * m * lam * scale if explore else np.zeros(N)
    entropies = np.full(N, np.nan)
    if explore:
        for k, idx in enumerate(groups):
            if idx.size and spec.subpops[k].lambda_explore > 0:
                entropies[idx] = policy_entropy(k, spec) + 0.5 * m * np.log(scale[idx])

    rec_idx = config.record_indices()
    rec_pos = {int(j): i for i, j in enumerate(rec_idx)}
    states = np.empty((rec_idx.size, N, n))
    actions = np.empty((rec_idx.size, N, m))
    means = np.empty((rec_idx.size, N, m))
    running = {"original": np.empty((grid.steps + 1, N)), "exploratory": np.empty((grid.steps + 1, N))}
    xbar_N = np.empty((grid.steps + 1, n * K))
    mubar_N = np.empty((grid.steps + 1, m * K))
    increments = np.empty((grid.steps, N, r)) if config.keep_increments else None

    for j, t in enumerate(times):
        mu = np.empty((N, m))
        for k, idx in enumerate(groups):
            if idx.size:
                mu[idx] = classical_control(t, x[idx], mf, k)
        mu += shift
        dW, z = bank.at(j)
        a = mu.copy()
        if explore:
            for k, idx in enumerate(groups):
                if idx.size:
                    a[idx] += (z[idx] * np.sqrt(scale[idx])[:, None]) @ factors[k].T
        xbar_N[j] = _type_means(x, types, K)
        mubar_N[j] = _type_means(mu, types, K)
        if limit_field:
            x_field, mu_field = mf.xbar_at(t), mf.mubar_at(t)
        else:
            x_field, mu_field = xbar_N[j], mubar_N[j]
        if j in rec_pos:
            states[rec_pos[j]], actions[rec_pos[j]], means[rec_pos[j]] = x, a, mu
        x_next = np.empty_like(x)
        for k, idx in enumerate(groups):
            if not idx.size:
                continue
            p = spec.subpops[k]
            Fbar, Hbar, psibar = coupling[k]
            dev = x[idx] - psibar @ x_field
            running["original"][j, idx] = _running_cost(p, dev, a[idx])
            running["exploratory"][j, idx] = _running_cost(p, dev, mu[idx]) + quad_extra[idx]
            if j < grid.steps:
                drift = x[idx] @ p.A.T + mu[idx] @ p.B.T + Fbar @ x_field + Hbar @ mu_field + drift_offset[k][j]
                x_next[idx] = x[idx] + drift * dt + dW[idx] @ p.D.T
        if j < grid.steps:
            if increments is not None:
                increments[j] = dW
            bad = ~np.all(np.isfinite(x_next), axis=1)
            if np.any(bad):
                agent = int(np.flatnonzero(bad)[0])
                raise NumericalError(f"non-finite state for agent {agent} at t={times[j + 1]:.6g}",
                                     detail={"agent": agent, "t": float(times[j + 1])})
            x = x_next

    logger.debug("simulated %d agents (%s, %s field) on %d steps",
                 N, config.mode, "limit" if limit_field else "empirical", grid.steps)
    return SimulationBatch(
        config=config,
        limit_field=limit_field,
        types=types,
        record_times=times[rec_idx],
        states=states,
        actions=actions,
        means=means,
        xbar=Trajectory(grid, xbar_N),
        mubar=Trajectory(grid, mubar_N),
        running=running,
        final_states=x.copy(),
        entropies=entropies,
        seed=seed,
        increments=increments,
        deviated=deviated,
    )


def simulate_population(spec: PopulationSpec, mf: MeanFieldSolution, config: SimConfig,
                        deviation: Deviation | None = None) -> SimulationBatch:
    """N agents coupled through their empirical averages; a deviation applies to agent 0."""
    return _simulate(spec, mf, config, limit_field=False, deviation=deviation)


def simulate_representative(spec: PopulationSpec, mf: MeanFieldSolution, grid: TimeGrid, seed,
                            counts=None, mode="exploratory", deviation: Deviation | None = None,
                            deviate_all=False, record=None, coupling="crn",
                            keep_increments=False) -> SimulationBatch:
    """Independent agents driven by the solved xbar(t), mubar(t).

    Agent i shares its random stream with agent i of a population run on the same
    seed. counts defaults to one agent of type 0.
    """
    if counts is None:
        counts = np.eye(spec.K, dtype=int)[0]
    config = SimConfig(counts=tuple(counts), grid=grid, seed=seed, mode=mode, coupling=coupling,
                       record=record, keep_increments=keep_increments)
    return _simulate(spec, mf, config, limit_field=True, deviation=deviation, deviate_all=deviate_all)


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_err: float
    values: np.ndarray
    mode: str
    tail_bound: float

    def to_dict(self):
        return {"mean": self.mean, "std_err": self.std_err, "mode": self.mode,
                "tail_bound": self.tail_bound, "samples": int(self.values.size)}


def discounted_length(grid: TimeGrid, rho):
    """Integral of e^{-rho t} over the grid interval."""
    if rho == 0:
        return grid.horizon
    return (np.exp(-rho * grid.t0) - np.exp(-rho * grid.t1)) / rho


def standard_error(values):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(values.size))


def _tail_bound(running, grid, rho):
    if rho <= 0:
        return float("inf")
    start = int(np.floor((1.0 - LATE_WINDOW) * grid.steps))
    level = float(np.max(np.mean(np.abs(running[start:]), axis=1), initial=0.0))
    return 2.0 * level * np.exp(-rho * grid.t1) / rho


def empirical_cost(batch: SimulationBatch, spec: PopulationSpec, k, mode="exploratory", tol=None,
                   agents=None, mf: MeanFieldSolution | None = None, include_tail=False) -> CostEstimate:
    """Discounted trapezoid cost of type-k agents (or the given agent indices).

    original: sampled actions; exploratory: integral of the running cost against the
    policy; regularized: exploratory minus lambda H (1 - e^{-rho T}) / rho.
    include_tail adds e^{-rho T} (1/2 x_T^T Pi x_T + s(T)^T x_T) from mf.
    """
    if mode not in COST_MODES:
        raise SpecError(f"unknown cost mode {mode!r}")
    grid = batch.config.grid
    idx = batch.agents_of(k) if agents is None else np.asarray(agents, dtype=int)
    if idx.size == 0:
        raise SpecError(f"no agents of type {k} in the batch")
    if np.any(batch.types[idx] != k):
        raise SpecError(f"agents {idx.tolist()} are not all of type {k}")
    base = "original" if mode == "original" else "exploratory"
    running = batch.running[base][:, idx]
    values = discount_weights(grid, spec.rho) @ running
    lam = spec.subpops[k].lambda_explore
    if mode == "regularized" and lam > 0:
        if batch.config.mode != "exploratory":
            raise DegeneratePolicyError("entropy undefined (Dirac)")
        values = values - lam * batch.entropies[idx] * discounted_length(grid, spec.rho)
    if include_tail:
        if mf is None:
            raise SpecError("the continuation tail needs the mean field solution")
        xT = batch.final_states[idx]
        Pi, s = mf.Pi_at(k, grid.t1), mf.s_at(k, grid.t1)
        values = values + np.exp(-spec.rho * grid.t1) * (0.5 * np.einsum('ij,jk,ik->i', xT, Pi, xT) + xT @ s)
    bound = _tail_bound(running, grid, spec.rho)
    if tol is not None and bound > tol:
        raise HorizonTooShortError("horizon too short for rho",
                                   detail={"tail_bound": bound, "tol": float(tol), "horizon": grid.horizon})
    return CostEstimate(mean=float(np.mean(values)), std_err=standard_error(values),
                        values=values, mode=mode, tail_bound=bound)
