"""Mean field consistency system: gains J and L(t), aggregate drift Abar and
mbar(t), the backward offset ODE for s_k and the forward mean-state ODE.

The classical and the exploratory (entropy-regularised) games lead to the same
consistency mapping, so one solver serves both; the label is bookkeeping only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import (
    ConsistencyDivergedError, NumericalError, SpecError, SteadyStateUndefinedError,
)
from games.specs import PopulationSpec, min_eigenvalue, selector_matrix
from solver.numerics import (
    HalfStepTable, TimeGrid, Trajectory, integrate_ode, spectral_abscissa,
)
from solver.riccati import (
    RiccatiSolution, StabilityReport, riccati_flow, solve_differential_riccati,
    solve_discounted_are, verify_stability,
)

logger = logging.getLogger(__name__)

DECAY_TARGET = 1e-8
LABELS = ("classical", "exploratory")


@dataclass(frozen=True)
class TerminalCondition:
    """Finite-horizon data: Pi_k(T) and s_k(T) per type."""

    Pi_T: tuple
    s_T: tuple

    def __post_init__(self):
        object.__setattr__(self, "Pi_T", tuple(np.asarray(P, dtype=float) for P in self.Pi_T))
        object.__setattr__(self, "s_T", tuple(np.atleast_1d(np.asarray(s, dtype=float)) for s in self.s_T))


@dataclass(frozen=True)
class SolverConfig:
    horizon: float | None = None
    steps: int | None = None
    dt: float = 0.01
    damping: float = 0.5
    tol: float = 1e-10
    max_iters: int = 500
    max_horizon: float = 400.0
    terminal: TerminalCondition | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise SpecError("solver tol must be positive")
        if not 0 < self.damping <= 1:
            raise SpecError("damping must lie in (0, 1]")
        if self.max_iters < 1:
            raise SpecError("max_iters must be at least 1")
        if self.horizon is not None and not self.horizon > 0:
            raise SpecError("horizon must be positive")
        if self.terminal is not None and self.horizon is None:
            raise SpecError("a terminal condition needs an explicit horizon")


@dataclass(frozen=True)
class SteadyState:
    s: tuple
    xbar: np.ndarray


@dataclass(frozen=True)
class MeanFieldSolution:
    spec: PopulationSpec
    grid: TimeGrid
    Pi: tuple
    s: tuple
    J: np.ndarray
    L: Trajectory
    Abar: np.ndarray
    mbar: Trajectory
    xbar: Trajectory
    mubar: Trajectory
    residual: float
    iterations: int
    label: str = "exploratory"
    Pi_paths: tuple | None = None
    J_path: Trajectory | None = None
    Abar_path: Trajectory | None = None
    stability: tuple = field(default_factory=tuple)

    @property
    def finite_horizon(self):
        return self.Pi_paths is not None

    @property
    def stable(self):
        return all(report.ok for report in self.stability)

    def Pi_at(self, k, t):
        if self.Pi_paths is not None:
            return self.Pi_paths[k].at(t)
        return self.Pi[k].Pi

    def J_at(self, t):
        return self.J_path.at(t) if self.J_path is not None else self.J

    def s_at(self, k, t):
        return self.s[k].at(t)

    def xbar_at(self, t):
        return self.xbar.at(t)

    def mubar_at(self, t):
        return self.mubar.at(t)


@dataclass(frozen=True)
class _Coefficients:
    """Stacked linear coefficients of the offset and mean-state equations at one time."""

    J: np.ndarray
    Abar: np.ndarray
    Ds: np.ndarray
    Px: np.ndarray
    Pmu: np.ndarray
    Pb: np.ndarray
    cs: np.ndarray
    Ms: np.ndarray
    cm: np.ndarray
    Lam: np.ndarray
    l0: np.ndarray


def _coefficients(spec: PopulationSpec, Pis) -> _Coefficients:
    n, m, K, rho = spec.n, spec.m, spec.K, spec.rho
    nK, mK = n * K, m * K
    J = np.zeros((mK, nK))
    Abar = np.zeros((nK, nK))
    Ds = np.zeros((nK, nK))
    Px = np.zeros((nK, nK))
    Pmu = np.zeros((nK, mK))
    Pb = np.zeros((nK, nK))
    cs = np.zeros(nK)
    Ms = np.zeros((nK, nK))
    cm = np.zeros(nK)
    Lam = np.zeros((mK, nK))
    l0 = np.zeros(mK)
    for k, p in enumerate(spec.subpops):
        Rinv = p.Rinv
        e_k = selector_matrix(k, n, K)
        sx, su = slice(k * n, (k + 1) * n), slice(k * m, (k + 1) * m)
        J[su] = -Rinv @ (p.B.T @ Pis[k] + p.S.T) @ e_k + Rinv @ p.S.T @ spec.psibar(k)
        Lam[su, sx] = -Rinv @ p.B.T
        l0[su] = -Rinv @ p.nvec
    for k, p in enumerate(spec.subpops):
        Pi, Rinv = Pis[k], p.Rinv
        e_k = selector_matrix(k, n, K)
        sx = slice(k * n, (k + 1) * n)
        Fbar, Hbar, psibar = spec.Fbar(k), spec.Hbar(k), spec.psibar(k)
        BRinv = p.B @ Rinv
        SRinv = p.S @ Rinv
        Abar[sx] = (p.A - BRinv @ (p.B.T @ Pi + p.S.T)) @ e_k + BRinv @ p.S.T @ psibar + Fbar + Hbar @ J
        Gs = p.A.T - SRinv @ p.B.T - Pi @ BRinv @ p.B.T
        Ds[sx, sx] = rho * np.eye(n) - Gs
        Px[sx] = -Pi @ (Fbar + BRinv @ p.S.T @ psibar) - (SRinv @ p.S.T - p.Q) @ psibar
        Pmu[sx] = -Pi @ Hbar
        Pb[sx, sx] = -Pi
        cs[sx] = Pi @ BRinv @ p.nvec + SRinv @ p.nvec - p.eta
        Ms[sx, sx] = -BRinv @ p.B.T
        Ms[sx] += Hbar @ Lam
        cm[sx] = -BRinv @ p.nvec + Hbar @ l0
    return _Coefficients(J, Abar, Ds, Px, Pmu, Pb, cs, Ms, cm, Lam, l0)


class _CoefficientPath:
    """Coefficients along the grid: one set (stationary) or one per RK4 stage time."""

    def __init__(self, grid, coeffs):
        self.grid = grid
        self.coeffs = coeffs
        self.varying = isinstance(coeffs, list)

    def at(self, t):
        if not self.varying:
            return self.coeffs
        idx = int(np.rint(2.0 * (t - self.grid.t0) / self.grid.dt))
        return self.coeffs[min(max(idx, 0), len(self.coeffs) - 1)]

    def at_node(self, j):
        return self.coeffs[2 * j] if self.varying else self.coeffs


def _stack(values):
    return np.concatenate([np.atleast_1d(v) for v in values])


def _b_table(spec, times):
    return np.concatenate([p.b.sample(times) for p in spec.subpops], axis=1)


def feedback_gains(Pis, s_trajs, spec: PopulationSpec):
    """J and L(t) for stationary Riccati matrices Pis and offset trajectories s_k(t)."""
    Pis = [P.Pi if isinstance(P, RiccatiSolution) else np.asarray(P, dtype=float) for P in Pis]
    if len(Pis) != spec.K or len(s_trajs) != spec.K:
        raise SpecError(f"expected {spec.K} Riccati solutions and offsets")
    for P in Pis:
        if P.shape != (spec.n, spec.n):
            raise SpecError(f"Riccati matrix has shape {P.shape}, expected {(spec.n, spec.n)}")
    grid = s_trajs[0].grid
    if any(s.grid != grid for s in s_trajs):
        raise SpecError("offset trajectories must share one grid")
    coeffs = _coefficients(spec, Pis)
    s_stacked = np.concatenate([s.values for s in s_trajs], axis=1)
    L = s_stacked @ coeffs.Lam.T + coeffs.l0
    return coeffs.J, Trajectory(grid, L)


def aggregate_drift(spec: PopulationSpec, Pis, J, s_trajs):
    """Abar (stacked rows Abar_k) and mbar(t)."""
    Pis = [P.Pi if isinstance(P, RiccatiSolution) else np.asarray(P, dtype=float) for P in Pis]
    coeffs = _coefficients(spec, Pis)
    J = np.asarray(J, dtype=float)
    if J.shape != coeffs.J.shape:
        raise SpecError(f"gain J has shape {J.shape}, expected {coeffs.J.shape}")
    n = spec.n
    Abar = coeffs.Abar.copy()
    for k in range(spec.K):
        sx = slice(k * n, (k + 1) * n)
        Hbar = spec.Hbar(k)
        Abar[sx] += Hbar @ (J - coeffs.J)
    grid = s_trajs[0].grid
    s_stacked = np.concatenate([s.values for s in s_trajs], axis=1)
    mbar = s_stacked @ coeffs.Ms.T + coeffs.cm + _b_table(spec, grid.times)
    return Abar, Trajectory(grid, mbar)


def steady_state(spec: PopulationSpec, Pis, at_time=None) -> SteadyState:
    """Joint algebraic solution of the offset and mean-state equations with zero time derivatives.

    b_k must be time-constant unless at_time freezes it at one instant.
    """
    Pis = [P.Pi if isinstance(P, RiccatiSolution) else np.asarray(P, dtype=float) for P in Pis]
    if at_time is None:
        if not all(p.b.is_constant for p in spec.subpops):
            raise SteadyStateUndefinedError("steady state undefined: drift offset b_k(t) is time-varying")
        at_time = 0.0
    c = _coefficients(spec, Pis)
    nK = spec.n * spec.K
    b = _b_table(spec, np.array([at_time]))[0]
    M = np.block([[c.Ds + c.Pmu @ c.Lam, c.Px + c.Pmu @ c.J],
                  [c.Ms, c.Abar]])
    rhs = -np.concatenate([c.Pb @ b + c.cs + c.Pmu @ c.l0, b + c.cm])
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > 1e12:
        raise SteadyStateUndefinedError("steady state undefined: singular linear system",
                                        detail={"condition": float(np.linalg.cond(M))})
    z = np.linalg.solve(M, rhs)
    n = spec.n
    return SteadyState(s=tuple(z[k * n:(k + 1) * n] for k in range(spec.K)), xbar=z[nK:])


def _auto_horizon(spec, Abar, config):
    rates = [spec.rho]
    abscissa = spectral_abscissa(Abar)
    if abscissa < 0:
        rates.append(-abscissa)
    horizon = np.log(1.0 / DECAY_TARGET) / min(rates)
    return float(min(horizon, config.max_horizon))


def _grid_for(config, horizon):
    if config.steps is not None:
        return TimeGrid(0.0, horizon, config.steps)
    return TimeGrid.from_dt(horizon, config.dt)


class _Sweeps:
    """The two ODE sweeps of one Picard step on a fixed grid."""

    def __init__(self, spec, grid, path):
        self.spec = spec
        self.grid = grid
        self.path = path
        self.b = HalfStepTable(grid, _b_table(spec, grid.half_times))

    def backward(self, s_T, xbar: Trajectory, mubar: Trajectory) -> Trajectory:
        xb = HalfStepTable(self.grid, xbar.at_half_steps())
        mu = HalfStepTable(self.grid, mubar.at_half_steps())

        def rhs(t, s):
            c = self.path.at(t)
            return c.Ds @ s + c.Px @ xb(t) + c.Pmu @ mu(t) + c.Pb @ self.b(t) + c.cs

        return integrate_ode(rhs, s_T, self.grid, direction="backward")

    def forward(self, x0, s: Trajectory) -> Trajectory:
        st = HalfStepTable(self.grid, s.at_half_steps())

        def rhs(t, x):
            c = self.path.at(t)
            return c.Abar @ x + c.Ms @ st(t) + self.b(t) + c.cm

        return integrate_ode(rhs, x0, self.grid, direction="forward")

    def controls(self, xbar: Trajectory, s: Trajectory) -> Trajectory:
        values = np.empty((self.grid.steps + 1, self.spec.m * self.spec.K))
        for j in range(self.grid.steps + 1):
            c = self.path.at_node(j)
            values[j] = c.J @ xbar.values[j] + c.Lam @ s.values[j] + c.l0
        return Trajectory(self.grid, values)

    def mbar(self, s: Trajectory) -> Trajectory:
        b = self.b.values[0::2]
        values = np.empty_like(s.values)
        for j in range(self.grid.steps + 1):
            c = self.path.at_node(j)
            values[j] = c.Ms @ s.values[j] + b[j] + c.cm
        return Trajectory(self.grid, values)


def _split(traj: Trajectory, K, n):
    return tuple(Trajectory(traj.grid, traj.values[:, k * n:(k + 1) * n]) for k in range(K))


def solve_consistency(spec: PopulationSpec, config: SolverConfig | None = None,
                      label="exploratory") -> MeanFieldSolution:
    """Damped Picard iteration on the consistency system.

    Each step integrates s backward driven by the current (xbar, mubar), rebuilds
    L and mbar, integrates xbar forward from the stacked initial mean, sets
    mubar = J xbar + L and damps xbar, mubar. Convergence is the sup-norm change
    of s and of the undamped forward output between consecutive steps.
    """
    if label not in LABELS:
        raise SpecError(f"unknown solution label {label!r}")
    config = config or SolverConfig()
    n, K = spec.n, spec.K
    finite = config.terminal is not None

    if finite:
        if len(config.terminal.Pi_T) != K or len(config.terminal.s_T) != K:
            raise SpecError(f"terminal condition needs {K} matrices and offsets")
        horizon = float(config.horizon)
        grid = _grid_for(config, horizon)
        Pi_paths = tuple(
            solve_differential_riccati(p, spec.rho, config.terminal.Pi_T[k], grid, require_psd=False)
            for k, p in enumerate(spec.subpops))
        half = [P.at_half_steps() for P in Pi_paths]
        coeffs = [_coefficients(spec, [h[i] for h in half]) for i in range(2 * grid.steps + 1)]
        path = _CoefficientPath(grid, coeffs)
        Pis = tuple(
            RiccatiSolution(Pi=P.values[0], residual=0.0, iterations=0,
                            closed_loop_abscissa=float("nan"), horizon=horizon)
            for P in Pi_paths)
        s_T = _stack(config.terminal.s_T)
        stability = ()
    else:
        Pis = tuple(solve_discounted_are(p, spec.rho, tol=config.tol) for p in spec.subpops)
        for k, sol in enumerate(Pis):
            if min_eigenvalue(sol.Pi) <= 1e-10 * (1.0 + np.linalg.norm(sol.Pi)):
                logger.warning("type %d: Riccati solution only positive semidefinite; continuing", k)
        coeffs = _coefficients(spec, [sol.Pi for sol in Pis])
        margin = 0.5 * spec.rho - spectral_abscissa(coeffs.Abar)
        if not margin > 0:
            raise ConsistencyDivergedError(
                "consistency iteration diverged: Abar - (rho/2) I is not stable",
                detail={"abar_margin": margin})
        horizon = float(config.horizon) if config.horizon is not None else _auto_horizon(spec, coeffs.Abar, config)
        grid = _grid_for(config, horizon)
        path = _CoefficientPath(grid, coeffs)
        Pi_paths = None
        s_T = _stack(steady_state(spec, [sol.Pi for sol in Pis], at_time=grid.t1).s)
        stability = tuple(verify_stability(sol, coeffs.Abar, spec.rho) for sol in Pis)
        for k, report in enumerate(stability):
            for msg in report.messages:
                logger.warning("type %d: %s", k, msg)

    sweeps = _Sweeps(spec, grid, path)
    x0 = spec.stacked_x0()
    s_prev = Trajectory(grid, np.tile(s_T, (grid.steps + 1, 1)))
    xbar_iter = Trajectory(grid, np.tile(x0, (grid.steps + 1, 1)))
    mu_iter = sweeps.controls(xbar_iter, s_prev)
    x_prev = sweeps.forward(x0, s_prev)
    d = config.damping

    for iteration in range(1, config.max_iters + 1):
        try:
            s_new = sweeps.backward(s_T, xbar_iter, mu_iter)
            x_new = sweeps.forward(x0, s_new)
        except NumericalError as exc:
            raise ConsistencyDivergedError(
                "consistency iteration diverged", detail={"iteration": iteration, **exc.detail}) from exc
        mu_new = sweeps.controls(x_new, s_new)
        change = max(s_new.sup_distance(s_prev), x_new.sup_distance(x_prev))
        logger.debug("picard %d: change %.3e", iteration, change)
        if not np.isfinite(change) or change > 1e100:
            raise ConsistencyDivergedError("consistency iteration diverged",
                                           detail={"iteration": iteration, "change": float(change)})
        if change < config.tol:
            break
        xbar_iter = Trajectory(grid, d * x_new.values + (1 - d) * xbar_iter.values)
        mu_iter = Trajectory(grid, d * mu_new.values + (1 - d) * mu_iter.values)
        s_prev, x_prev = s_new, x_new
    else:
        raise ConsistencyDivergedError(
            "consistency iteration diverged",
            detail={"iterations": config.max_iters, "change": float(change)})

    s_check = sweeps.backward(s_T, x_new, mu_new)
    x_check = sweeps.forward(x0, s_check)
    residual = max(s_check.sup_distance(s_new), x_check.sup_distance(x_new),
                   sweeps.controls(x_check, s_check).sup_distance(mu_new))
    logger.info("mean field (%s) converged in %d iterations, residual %.3e, horizon %.4g",
                label, iteration, residual, horizon)

    L = Trajectory(grid, s_new.values @ path.at_node(0).Lam.T + path.at_node(0).l0)
    J_path = Abar_path = None
    if finite:
        J_path = Trajectory(grid, np.stack([path.at_node(j).J for j in range(grid.steps + 1)]))
        Abar_path = Trajectory(grid, np.stack([path.at_node(j).Abar for j in range(grid.steps + 1)]))
    return MeanFieldSolution(
        spec=spec,
        grid=grid,
        Pi=Pis,
        s=_split(s_new, K, n),
        J=path.at_node(0).J,
        L=L,
        Abar=path.at_node(0).Abar,
        mbar=sweeps.mbar(s_new),
        xbar=x_new,
        mubar=mu_new,
        residual=float(residual),
        iterations=iteration,
        label=label,
        Pi_paths=Pi_paths,
        J_path=J_path,
        Abar_path=Abar_path,
        stability=stability,
    )


def _fd_derivative(values, h):
    """Fourth-order finite differences along axis 0 (one-sided at the ends)."""
    y = np.asarray(values, dtype=float)
    N = y.shape[0]
    if N < 5:
        return np.gradient(y, h, axis=0)
    d = np.empty_like(y)
    d[2:-2] = (-y[4:] + 8 * y[3:-1] - 8 * y[1:-3] + y[:-4]) / (12 * h)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * h)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * h)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * h)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * h)
    return d


def consistency_residual(solution: MeanFieldSolution, spec: PopulationSpec) -> float:
    """Max defect of every consistency equation, recomputed from the solution's own
    components with finite-difference derivatives."""
    grid = solution.grid
    h, times = grid.dt, grid.times
    s = np.concatenate([traj.values for traj in solution.s], axis=1)
    x, mu = solution.xbar.values, solution.mubar.values
    b = _b_table(spec, times)
    s_dot = _fd_derivative(s, h)
    x_dot = _fd_derivative(x, h)
    defects = []
    if solution.Pi_paths is not None:
        for k, p in enumerate(spec.subpops):
            P = solution.Pi_paths[k].values
            P_dot = _fd_derivative(P, h)
            flow = np.stack([riccati_flow(P[j], p, spec.rho) for j in range(grid.steps + 1)])
            defects.append(np.max(np.abs(P_dot + flow)))
    else:
        for k, p in enumerate(spec.subpops):
            defects.append(np.max(np.abs(riccati_flow(solution.Pi[k].Pi, p, spec.rho))))
    fixed = None if solution.Pi_paths is not None else _coefficients(spec, [sol.Pi for sol in solution.Pi])
    for j in range(grid.steps + 1):
        c = fixed or _coefficients(spec, [P.values[j] for P in solution.Pi_paths])
        defects.append(np.max(np.abs(s_dot[j] - (c.Ds @ s[j] + c.Px @ x[j] + c.Pmu @ mu[j] + c.Pb @ b[j] + c.cs))))
        defects.append(np.max(np.abs(x_dot[j] - (c.Abar @ x[j] + c.Ms @ s[j] + b[j] + c.cm))))
        defects.append(np.max(np.abs(mu[j] - (c.J @ x[j] + c.Lam @ s[j] + c.l0))))
    return float(max(defects))
