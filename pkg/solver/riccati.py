"""Discounted algebraic Riccati equation with cross term, its differential form, and
the stability margins the mean field solution relies on."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from core.exceptions import ODEBlowUpError, RiccatiNotStabilizedError, SpecError
from games.specs import SubpopParams, is_psd, is_symmetric, min_eigenvalue
from solver.numerics import TimeGrid, Trajectory, integrate_ode, spectral_abscissa

logger = logging.getLogger(__name__)

WINDOW = 1.0
MAX_NEWTON = 20


@dataclass(frozen=True)
class RiccatiSolution:
    Pi: np.ndarray
    residual: float
    iterations: int
    closed_loop_abscissa: float
    horizon: float = 0.0

    def to_dict(self):
        return {
            "Pi": self.Pi.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "closed_loop_abscissa": self.closed_loop_abscissa,
            "horizon": self.horizon,
        }


@dataclass(frozen=True)
class StabilityReport:
    ok: bool
    pi_min_eigenvalue: float
    abar_margin: float
    closed_loop_margin: float
    messages: tuple = field(default_factory=tuple)

    def to_dict(self):
        return {
            "ok": self.ok,
            "pi_min_eigenvalue": self.pi_min_eigenvalue,
            "abar_margin": self.abar_margin,
            "closed_loop_margin": self.closed_loop_margin,
            "messages": list(self.messages),
        }


def _gain_matrix(Pi, p: SubpopParams):
    return np.linalg.solve(p.R, p.B.T @ Pi + p.S.T)


def closed_loop_matrix(Pi, p: SubpopParams):
    """A - B R^-1 (B^T Pi + S^T)."""
    return p.A - p.B @ _gain_matrix(Pi, p)


def riccati_flow(Pi, p: SubpopParams, rho):
    """d Pi / d tau in reversed time; zero exactly at an ARE solution."""
    PB_S = Pi @ p.B + p.S
    return Pi @ p.A + p.A.T @ Pi - PB_S @ np.linalg.solve(p.R, PB_S.T) + p.Q - rho * Pi


def are_residual(Pi, p: SubpopParams, rho) -> float:
    return float(np.linalg.norm(riccati_flow(Pi, p, rho), "fro"))


def _steps_per_window(p: SubpopParams, rho):
    Rinv = np.linalg.inv(p.R)
    G = p.B @ Rinv @ p.B.T
    Ashift = p.A - 0.5 * rho * np.eye(p.n) - p.B @ Rinv @ p.S.T
    Qt = p.Q - p.S @ Rinv @ p.S.T
    rate = np.linalg.norm(Ashift, 2) + np.sqrt(np.linalg.norm(Qt, 2) * np.linalg.norm(G, 2)) \
        + np.linalg.norm(G, 2) + 1.0
    return int(np.clip(np.ceil(8.0 * rate), 20, 20000))


def _newton_polish(Pi, p: SubpopParams, rho, tol):
    """Newton-Kleinman steps on the shifted ARE, kept only while the residual drops."""
    Rinv = np.linalg.inv(p.R)
    G = p.B @ Rinv @ p.B.T
    Ashift = p.A - 0.5 * rho * np.eye(p.n) - p.B @ Rinv @ p.S.T
    Qt = p.Q - p.S @ Rinv @ p.S.T
    best, best_res = Pi, are_residual(Pi, p, rho)
    for _ in range(MAX_NEWTON):
        if best_res <= 0.1 * tol:
            break
        Acl = Ashift - G @ best
        if spectral_abscissa(Acl) >= 0:
            break
        candidate = solve_continuous_lyapunov(Acl.T, -(Qt + best @ G @ best))
        candidate = 0.5 * (candidate + candidate.T)
        res = are_residual(candidate, p, rho)
        if not np.isfinite(res) or res >= best_res:
            break
        best, best_res = candidate, res
    return best, best_res


def solve_discounted_are(params: SubpopParams, rho, tol=1e-10, max_horizon=None) -> RiccatiSolution:
    """rho Pi = Pi A + A^T Pi - (Pi B + S) R^-1 (B^T Pi + S^T) + Q.

    The differential Riccati equation is integrated backward from Pi(T) = 0 in
    windows of one time unit until successive window ends differ by less than
    tol*(1+|Pi|); the iterate is then polished with Newton-Kleinman steps.
    """
    n = params.n
    steps = _steps_per_window(params, rho)
    window = TimeGrid(0.0, WINDOW, steps)
    rhs = lambda _t, P: riccati_flow(P, params, rho)
    Pi = np.zeros((n, n))
    tau, windows = 0.0, 0
    while True:
        try:
            nxt = integrate_ode(rhs, Pi, window).values[-1]
        except ODEBlowUpError as exc:
            raise RiccatiNotStabilizedError(
                "Riccati did not stabilize (finite escape)", detail={"tau": tau + exc.t}) from exc
        nxt = 0.5 * (nxt + nxt.T)
        tau += WINDOW
        windows += 1
        change = np.linalg.norm(nxt - Pi, "fro")
        Pi = nxt
        if change < tol * (1.0 + np.linalg.norm(Pi, "fro")):
            break
        margin = 0.5 * rho - spectral_abscissa(closed_loop_matrix(Pi, params))
        limit = max_horizon if max_horizon is not None else 200.0 / max(rho, abs(margin), 0.1)
        if tau >= limit:
            raise RiccatiNotStabilizedError(
                "Riccati did not stabilize",
                detail={"horizon": tau, "last_change": float(change), "limit": float(limit)})
    logger.debug("Riccati flow stationary after %d windows, change %.3g", windows, change)
    Pi, residual = _newton_polish(Pi, params, rho, tol)
    if residual > tol:
        raise RiccatiNotStabilizedError(
            f"Riccati residual {residual:.3g} above tolerance {tol:.3g}",
            detail={"residual": residual, "tol": tol})
    return RiccatiSolution(
        Pi=Pi,
        residual=residual,
        iterations=windows,
        closed_loop_abscissa=spectral_abscissa(closed_loop_matrix(Pi, params)),
        horizon=tau,
    )


def solve_differential_riccati(params: SubpopParams, rho, Pi_T, grid: TimeGrid,
                               require_psd=True) -> Trajectory:
    """Backward RK4 solution of the matrix Riccati ODE from Pi(t1) = Pi_T.

    require_psd=False admits an indefinite terminal matrix (book-value terms in
    the trading model).
    """
    Pi_T = np.asarray(Pi_T, dtype=float)
    if not is_symmetric(Pi_T) or Pi_T.shape != (params.n, params.n):
        raise SpecError("terminal Riccati matrix must be symmetric n x n")
    if require_psd and not is_psd(Pi_T):
        raise SpecError("terminal Riccati matrix must be positive semidefinite")
    rhs = lambda _t, P: -riccati_flow(P, params, rho)
    traj = integrate_ode(rhs, Pi_T, grid, direction="backward")
    values = 0.5 * (traj.values + np.swapaxes(traj.values, 1, 2))
    return Trajectory(grid, values)


def verify_stability(solution: RiccatiSolution, Abar, rho) -> StabilityReport:
    """Pi > 0, abscissa(Abar) < rho/2 and abscissa(closed loop) < rho/2."""
    Pi = solution.Pi
    messages = []
    lam_min = min_eigenvalue(Pi)
    floor = 1e-10 * (1.0 + np.linalg.norm(Pi))
    if lam_min <= floor:
        messages.append(f"Pi not positive definite (min eigenvalue {lam_min:.3g})")
    abar_margin = 0.5 * rho - spectral_abscissa(Abar)
    if not abar_margin > 0:
        messages.append(f"Abar - (rho/2) I not stable (margin {abar_margin:.3g})")
    cl_margin = 0.5 * rho - solution.closed_loop_abscissa
    if not cl_margin > 0:
        messages.append(f"closed loop - (rho/2) I not stable (margin {cl_margin:.3g})")
    return StabilityReport(
        ok=not messages,
        pi_min_eigenvalue=lam_min,
        abar_margin=abar_margin,
        closed_loop_margin=cl_margin,
        messages=tuple(messages),
    )
