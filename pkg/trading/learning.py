"""Parameter estimation from market data and the model-based learning loop:
initialize with a base policy, then alternate estimation, planning and acting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import MFGError, ParameterUnidentifiableError, SpecError
from solver.numerics import TimeGrid, derive_seed
from trading.market import (
    ConstantRatePolicy, MarketParams, MeanFieldTradingPolicy, plan, realized_cost, simulate_market,
)

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12
RANK_TOL = 1e-10


@dataclass
class MarketDataset:
    """Midprice rows (dF, nubar dt, dt), one per step, and execution rows
    (S - F, q - q0), one per trader and step."""

    dF: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nubar_dt: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dt: np.ndarray = field(default_factory=lambda: np.zeros(0))
    spread: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inventory_dev: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_rows(self):
        return self.dF.size

    def extend(self, paths, params: MarketParams):
        dt = paths.grid.dt
        self.dF = np.concatenate([self.dF, np.diff(paths.F)])
        self.nubar_dt = np.concatenate([self.nubar_dt, paths.nubar * dt])
        self.dt = np.concatenate([self.dt, np.full(paths.grid.steps, dt)])
        self.spread = np.concatenate([self.spread, (paths.S - paths.F[:-1, None]).ravel()])
        self.inventory_dev = np.concatenate([self.inventory_dev, (paths.q[:-1] - params.q0).ravel()])
        return self


@dataclass(frozen=True)
class ParameterEstimate:
    sigma: float
    lambda_perm: float
    a_temp: float
    se_sigma: float
    se_lambda: float
    se_a: float
    n_rows: int
    drift: float | None = None

    def to_dict(self):
        return dict(self.__dict__)


def _ols(y, X):
    """Coefficients, residual sum of squares and (X^T X)^-1; None when X is rank deficient."""
    scale = np.linalg.norm(X, axis=0)
    if np.any(scale == 0) or np.linalg.matrix_rank(X / scale, tol=RANK_TOL) < X.shape[1]:
        return None
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    return coef, float(resid @ resid), np.linalg.inv(X.T @ X)


def estimate_params(data: MarketDataset, fit_drift=False) -> ParameterEstimate:
    """Least squares of dF on nubar dt (plus dt when fit_drift) for lambda_perm,
    sigma from the residual quadratic variation, and S - F on q - q0 for a_temp."""
    if data.n_rows < 2:
        raise SpecError("estimation needs at least two midprice rows")
    X = data.nubar_dt[:, None]
    if fit_drift:
        X = np.column_stack([X, data.dt])
    fit = _ols(data.dF, X)
    if fit is None:
        raise ParameterUnidentifiableError("lambda_perm unidentifiable: degenerate or collinear regressors",
                                           params=["lambda_perm"], detail={"n_rows": data.n_rows})
    coef, rss, xtx_inv = fit
    dof = max(data.n_rows - X.shape[1], 1)
    s2 = rss / dof
    sigma = float(np.sqrt(s2 / np.mean(data.dt)))
    se_lambda = float(np.sqrt(s2 * xtx_inv[0, 0]))

    exec_fit = _ols(data.spread, data.inventory_dev[:, None])
    if exec_fit is None:
        raise ParameterUnidentifiableError("a_temp unidentifiable: inventories never moved",
                                           params=["a_temp"])
    a_coef, a_rss, a_inv = exec_fit
    a_dof = max(data.spread.size - 1, 1)
    se_a = float(np.sqrt(a_rss / a_dof * a_inv[0, 0]))
    return ParameterEstimate(
        sigma=sigma,
        lambda_perm=float(coef[0]),
        a_temp=float(a_coef[0]),
        se_sigma=sigma / np.sqrt(2.0 * dof),
        se_lambda=se_lambda,
        se_a=se_a,
        n_rows=data.n_rows,
        drift=float(coef[1]) if fit_drift else None,
    )


@dataclass(frozen=True)
class EpisodeConfig:
    traders: int = 20
    episodes: int = 5
    steps: int = 200

    def __post_init__(self):
        if self.traders < 1 or self.episodes < 1 or self.steps < 1:
            raise SpecError("traders, episodes and steps must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    phase: str
    sigma_hat: float
    lambda_hat: float
    a_hat: float
    se_sigma: float
    se_lambda: float
    se_a: float
    inventory_gain: float | None
    cost: float
    cost_std_err: float
    n_rows: int

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class LearningTrace:
    records: list = field(default_factory=list)
    failure: dict | None = None

    @property
    def completed(self):
        return self.failure is None

    def dataset_sizes(self):
        return [r.n_rows for r in self.records]

    def to_rows(self):
        return [r.to_dict() for r in self.records]


TRACE_COLUMNS = ("iteration", "phase", "sigma_hat", "lambda_hat", "a_hat", "se_sigma", "se_lambda",
                 "se_a", "inventory_gain", "cost", "cost_std_err", "n_rows")


def _act(true_params, policy, episodes: EpisodeConfig, grid, seed, iteration, data):
    costs = []
    for e in range(episodes.episodes):
        paths = simulate_market(true_params, policy, episodes.traders, grid, derive_seed(seed, iteration, e))
        data.extend(paths, true_params)
        costs.append(realized_cost(paths, true_params))
    costs = np.concatenate(costs)
    return float(costs.mean()), float(costs.std(ddof=1) / np.sqrt(costs.size)) if costs.size > 1 else 0.0


def rl_loop(true_params: MarketParams, init_params: MarketParams, iterations, episodes: EpisodeConfig,
            lambda_explore, seed, fit_drift=False, progress=None) -> LearningTrace:
    """Phase 1 runs a constant liquidation rate (with exploration noise
    sqrt(lambda / kappa)) planned from init_params; each iteration then
    re-estimates on all data, re-plans and acts with the new policy."""
    if lambda_explore < 0:
        raise SpecError("lambda_explore must be nonnegative")
    grid = TimeGrid(0.0, true_params.T, episodes.steps)
    data = MarketDataset()
    trace = LearningTrace()
    noise = float(np.sqrt(lambda_explore / init_params.kappa_rate))
    base = ConstantRatePolicy.liquidation(init_params, noise_std=noise)
    cost, err = _act(true_params, base, episodes, grid, seed, 0, data)
    trace.records.append(IterationRecord(
        0, "initialization", init_params.sigma, init_params.lambda_perm, init_params.a_temp,
        float("nan"), float("nan"), float("nan"), None, cost, err, data.n_rows))
    logger.info("initialization: cost %.6g, %d rows", cost, data.n_rows)

    for it in range(1, iterations + 1):
        try:
            est = estimate_params(data, fit_drift=fit_drift)
            planned = init_params.replace(sigma=max(est.sigma, SIGMA_FLOOR),
                                          lambda_perm=max(est.lambda_perm, 0.0),
                                          a_temp=max(est.a_temp, 0.0))
            mf = plan(planned, episodes.steps, lambda_explore=lambda_explore)
        except MFGError as exc:
            trace.failure = {"iteration": it, **exc.to_dict()}
            logger.warning("learning loop halted at iteration %d: %s", it, exc.message)
            break
        policy = MeanFieldTradingPolicy(mf)
        cost, err = _act(true_params, policy, episodes, grid, seed, it, data)
        trace.records.append(IterationRecord(
            it, "acting", est.sigma, est.lambda_perm, est.a_temp, est.se_sigma, est.se_lambda, est.se_a,
            policy.inventory_gain(), cost, err, data.n_rows))
        logger.info("iteration %d: lambda_hat %.5g (se %.2g), a_hat %.5g, cost %.6g",
                    it, est.lambda_perm, est.se_lambda, est.a_temp, cost)
        if progress is not None:
            progress(it)
    return trace
