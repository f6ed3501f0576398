"""Electronic market with permanent and temporary price impact, its mapping to a
finite-horizon LQG mean field game, and trader policies.

Per trader the planning state is (q, F - F0) with trading rate nu as control:
    dq = nu dt,  dF = lambda_perm * nubar dt + sigma dW,
cash dZ = -S nu dt at execution price S = F + a_temp (q - q0).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from core.exceptions import NumericalError, SpecError
from games.specs import DriftTable, PopulationSpec, SubpopParams
from policies.policy import classical_control
from solver.meanfield import MeanFieldSolution, SolverConfig, TerminalCondition, solve_consistency
from solver.numerics import TimeGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarketParams:
    sigma: float
    lambda_perm: float
    a_temp: float
    phi_urgency: float
    psi_terminal: float
    T: float
    F0: float = 100.0
    q0: float = 1.0
    kappa_rate: float = 0.1

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.sigma > 0:
            raise SpecError("sigma must be positive")
        if not self.T > 0:
            raise SpecError("horizon T must be positive")
        if not self.kappa_rate > 0:
            raise SpecError("kappa_rate must be positive")
        for name in ("lambda_perm", "a_temp", "phi_urgency", "psi_terminal"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be nonnegative")

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def to_lqg(params: MarketParams, N_types=1, lambda_explore=0.0):
    """PopulationSpec (rho = 0) and the terminal condition of the execution problem.

    Cash and terminal book value expand into the running cross weight S = (a, 1)^T,
    the linear control cost -a q0 and the terminal matrix [[2 psi, -1], [-1, 0]].
    Q - S R^-1 S^T is indefinite here; the result is never passed to validate_spec.
    """
    if N_types < 1:
        raise SpecError("at least one trader type is needed")
    sub = SubpopParams(
        A=np.zeros((2, 2)),
        B=np.array([[1.0], [0.0]]),
        F=np.zeros((2, 2)),
        H=np.array([[0.0], [params.lambda_perm]]),
        D=np.array([[0.0], [params.sigma]]),
        b=DriftTable.zeros(2),
        Q=np.diag([params.phi_urgency, 0.0]),
        R=np.array([[params.kappa_rate]]),
        S=np.array([[params.a_temp], [1.0]]),
        eta=np.zeros(2),
        nvec=np.array([-params.a_temp * params.q0]),
        psi=np.zeros((2, 2)),
        lambda_explore=lambda_explore,
    )
    spec = PopulationSpec(
        subpops=(sub,) * N_types,
        pi=np.full(N_types, 1.0 / N_types),
        rho=0.0,
        x0_mean=np.array([params.q0, 0.0]),
        x0_cov=np.zeros((2, 2)),
    )
    Pi_T = np.array([[2.0 * params.psi_terminal, -1.0], [-1.0, 0.0]])
    terminal = TerminalCondition(Pi_T=(Pi_T,) * N_types, s_T=(np.zeros(2),) * N_types)
    return spec, terminal


def plan(params: MarketParams, steps, lambda_explore=0.0, damping=0.5, tol=1e-10) -> MeanFieldSolution:
    """Finite-horizon mean field solution of the execution game."""
    spec, terminal = to_lqg(params, lambda_explore=lambda_explore)
    config = SolverConfig(horizon=params.T, steps=steps, damping=damping, tol=tol, terminal=terminal)
    return solve_consistency(spec, config)


class ConstantRatePolicy:
    """Every trader trades at a fixed rate, plus optional Gaussian exploration noise."""

    def __init__(self, rate, noise_std=0.0):
        self.rate = float(rate)
        self.noise_std = float(noise_std)

    def mean(self, t, q, f):
        return np.full(q.shape, self.rate)

    @classmethod
    def liquidation(cls, params: MarketParams, noise_std=0.0):
        return cls(-params.q0 / params.T, noise_std)

    def summary(self):
        return {"kind": "constant", "rate": self.rate, "noise_std": self.noise_std}


class MeanFieldTradingPolicy:
    """Optimal Gaussian trading rate from a solved execution game."""

    def __init__(self, mf: MeanFieldSolution):
        self.mf = mf
        p = mf.spec.subpops[0]
        self.noise_std = float(np.sqrt(p.exploration_cov[0, 0]))

    def mean(self, t, q, f):
        x = np.column_stack([q, np.broadcast_to(f, np.shape(q))])
        return classical_control(t, x, self.mf, 0)[:, 0]

    def inventory_gain(self, t=0.0):
        """Coefficient of q in the mean trading rate."""
        p = self.mf.spec.subpops[0]
        gain = -p.Rinv @ (p.B.T @ self.mf.Pi_at(0, t) + p.S.T)
        return float(gain[0, 0])

    def summary(self):
        return {"kind": "meanfield", "inventory_gain": self.inventory_gain(), "noise_std": self.noise_std}


@dataclass(frozen=True)
class MarketPaths:
    grid: TimeGrid
    F: np.ndarray
    q: np.ndarray
    nu: np.ndarray
    nu_mean: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    nubar: np.ndarray

    @property
    def traders(self):
        return self.q.shape[1]


def simulate_market(params: MarketParams, policy, N, grid: TimeGrid, seed) -> MarketPaths:
    """Euler scheme for N traders sharing the midprice noise.

    Executed (sampled) rates move inventories and, through their average, the midprice.
    """
    if N < 1:
        raise SpecError("at least one trader is needed")
    rng = np.random.default_rng(int(seed))
    dt, steps = grid.dt, grid.steps
    F = np.empty(steps + 1)
    q = np.empty((steps + 1, N))
    Z = np.zeros((steps + 1, N))
    nu = np.empty((steps, N))
    nu_mean = np.empty((steps, N))
    S = np.empty((steps, N))
    nubar = np.empty(steps)
    F[0], q[0] = params.F0, params.q0
    for j, t in enumerate(grid.times[:-1]):
        dW = rng.standard_normal()
        z = rng.standard_normal(N)
        nu_mean[j] = policy.mean(t, q[j], F[j] - params.F0)
        nu[j] = nu_mean[j] + policy.noise_std * z
        nubar[j] = nu[j].mean()
        S[j] = F[j] + params.a_temp * (q[j] - params.q0)
        q[j + 1] = q[j] + nu[j] * dt
        Z[j + 1] = Z[j] - S[j] * nu[j] * dt
        F[j + 1] = F[j] + params.lambda_perm * nubar[j] * dt + params.sigma * np.sqrt(dt) * dW
        if not (np.isfinite(F[j + 1]) and np.all(np.isfinite(q[j + 1])) and np.all(np.isfinite(Z[j + 1]))):
            raise NumericalError(f"non-finite market state at t={grid.times[j + 1]:.6g}",
                                 detail={"t": float(grid.times[j + 1])})
    return MarketPaths(grid=grid, F=F, q=q, nu=nu, nu_mean=nu_mean, S=S, Z=Z, nubar=nubar)


def realized_cost(paths: MarketPaths, params: MarketParams):
    """Per trader: (1/2) phi int q^2 dt - Z_T - q_T (F_T - psi q_T)."""
    dt = paths.grid.dt
    urgency = 0.5 * params.phi_urgency * dt * np.sum(paths.q[:-1] ** 2, axis=0)
    qT = paths.q[-1]
    return urgency - paths.Z[-1] - qT * (paths.F[-1] - params.psi_terminal * qT)


def accounting_identity(paths: MarketPaths, params: MarketParams):
    """(wealth change, decomposition) per trader, wealth being Z + q F.

    The decomposition is sum q_{j+1} dF_j - a sum (q_j - q0) dq_j; the two agree
    exactly for the Euler scheme.
    """
    wealth = paths.Z[-1] + paths.q[-1] * paths.F[-1] - (paths.Z[0] + paths.q[0] * paths.F[0])
    dF = np.diff(paths.F)
    dq = np.diff(paths.q, axis=0)
    decomposition = (paths.q[1:] * dF[:, None]).sum(axis=0) \
        - params.a_temp * ((paths.q[:-1] - params.q0) * dq).sum(axis=0)
    return wealth, decomposition
