"""Numerical kernels: fixed-step RK4, spectral checks, Gaussian sampling, rate fits."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.interpolate import CubicSpline

from core.exceptions import NumericalError, ODEBlowUpError, OutsideGridError, SpecError

logger = logging.getLogger(__name__)

GRID_SLACK = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "t1", float(self.t1))
        object.__setattr__(self, "steps", int(self.steps))
        if not self.t1 > self.t0:
            raise SpecError(f"time grid needs t1 > t0, got [{self.t0}, {self.t1}]")
        if self.steps < 1:
            raise SpecError("time grid needs at least one step")

    @classmethod
    def from_dt(cls, horizon, dt, t0=0.0):
        steps = max(1, int(np.ceil(horizon / dt - 1e-9)))
        return cls(t0, t0 + horizon, steps)

    @property
    def dt(self):
        return (self.t1 - self.t0) / self.steps

    @property
    def horizon(self):
        return self.t1 - self.t0

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def half_times(self):
        """Nodes and midpoints, the points where RK4 evaluates a right-hand side."""
        return self.t0 + 0.5 * self.dt * np.arange(2 * self.steps + 1)

    def index(self, t):
        """Nearest node index of t; raises when t is off the grid."""
        self.check(t)
        return int(np.clip(np.rint((t - self.t0) / self.dt), 0, self.steps))

    def check(self, t):
        slack = GRID_SLACK * max(1.0, abs(self.t1))
        if np.any(np.asarray(t) < self.t0 - slack) or np.any(np.asarray(t) > self.t1 + slack):
            raise OutsideGridError(f"t={t} outside solved grid [{self.t0}, {self.t1}]",
                                   detail={"t0": self.t0, "t1": self.t1})


@dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != self.grid.steps + 1:
            raise SpecError(f"trajectory has {values.shape[0]} values for {self.grid.steps + 1} grid points")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape[1:]

    def sample(self, times):
        """Linear interpolation at the given times."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        self.grid.check(times)
        flat = self.values.reshape(self.values.shape[0], -1)
        nodes = self.grid.times
        out = np.empty((times.size, flat.shape[1]))
        for col in range(flat.shape[1]):
            out[:, col] = np.interp(times, nodes, flat[:, col])
        return out.reshape((times.size,) + self.shape)

    def at(self, t):
        return self.sample([t])[0]

    def spline(self):
        return CubicSpline(self.grid.times, self.values, axis=0)

    def at_half_steps(self):
        """Values at nodes and midpoints from a cubic spline (RK4 stage lookups)."""
        out = self.spline()(self.grid.half_times)
        out[0::2] = self.values
        return out

    def sup_distance(self, other):
        return float(np.max(np.abs(self.values - other.values), initial=0.0))


class HalfStepTable:
    """Lookup of precomputed values at RK4 stage times (nodes and midpoints)."""

    def __init__(self, grid, values):
        self.grid = grid
        self.values = np.asarray(values)
        if self.values.shape[0] != 2 * grid.steps + 1:
            raise SpecError("half-step table has the wrong length")

    def __call__(self, t):
        idx = int(np.rint(2.0 * (t - self.grid.t0) / self.grid.dt))
        return self.values[min(max(idx, 0), 2 * self.grid.steps)]


def integrate_ode(rhs, y0, grid: TimeGrid, direction="forward") -> Trajectory:
    """Classical RK4 with fixed step; backward integrates from t1 down to t0."""
    if direction not in ("forward", "backward"):
        raise SpecError(f"unknown direction {direction!r}")
    y = np.array(y0, dtype=float)
    h = grid.dt
    out = np.empty((grid.steps + 1,) + y.shape)
    if direction == "forward":
        order, sign = range(grid.steps), 1.0
        out[0] = y
    else:
        order, sign = range(grid.steps, 0, -1), -1.0
        out[grid.steps] = y
    times = grid.times
    for j in order:
        t = times[j]
        hs = sign * h
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * hs, y + 0.5 * hs * k1)
        k3 = rhs(t + 0.5 * hs, y + 0.5 * hs * k2)
        k4 = rhs(t + hs, y + hs * k3)
        y = y + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise ODEBlowUpError(t + hs)
        out[j + 1 if direction == "forward" else j - 1] = y
    return Trajectory(grid, out)


def spectral_abscissa(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise SpecError(f"spectral abscissa needs a square matrix, got {M.shape}")
    try:
        eigs = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue computation failed: {exc}") from exc
    return float(np.max(eigs.real))


def psd_factor(cov) -> np.ndarray:
    """Lower factor L with L L^T = cov.

    Cholesky with diagonal jitter up to 1e-12*trace, then a symmetric eigen
    factor for exactly singular covariances.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise SpecError("covariance must be square")
    scale = 1.0 + np.linalg.norm(cov)
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * scale:
        raise SpecError("covariance not symmetric")
    if not np.any(cov):
        return np.zeros_like(cov)
    trace = float(np.trace(cov))
    for jitter in (0.0, 1e-15 * trace, 1e-13 * trace, 1e-12 * trace):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            continue
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    if w[0] < -1e-10 * scale:
        raise SpecError(f"covariance not positive semidefinite (min eigenvalue {w[0]:.3g})")
    return V * np.sqrt(np.clip(w, 0.0, None))[None, :]


def sample_gaussian(mean, cov, rng, size=None) -> np.ndarray:
    """mean + L z with z standard normal drawn from rng."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    L = psd_factor(cov)
    shape = (mean.size,) if size is None else (size, mean.size)
    z = rng.standard_normal(shape)
    return mean + z @ L.T


def fit_rate(xs, ys) -> float:
    """OLS slope of log ys against log xs."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 3 or xs.size != ys.size:
        raise SpecError("rate fit needs at least 3 paired points")
    if np.any(ys <= 0) or np.any(xs <= 0):
        raise NumericalError("rate fit needs positive values", detail={"ys": ys.tolist()})
    return float(stats.linregress(np.log(xs), np.log(ys)).slope)


def agent_rng(seed, index):
    return np.random.default_rng(int(seed) ^ int(index))


def derive_seed(seed, *keys):
    """Independent 63-bit seed for (seed, keys), e.g. one per Monte Carlo rep."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def discount_weights(grid: TimeGrid, rho):
    """Trapezoid weights times e^{-rho t} over the grid nodes."""
    w = np.full(grid.steps + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w * np.exp(-rho * grid.times)
