"""Control densities on a bounded action grid, the entropy-regularised cost
functional evaluated by quadrature, multiplicative perturbations and a
finite-difference Gateaux derivative.

The state path here is the mean path of the linear dynamics driven by the
density means; diffusion only adds a density-independent constant to the cost.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from core.exceptions import DegeneratePolicyError, QuadratureError, SpecError
from games.specs import PopulationSpec
from policies.policy import (
    classical_control, gaussian_pdf, policy_entropy, value_gap, value_gap_standard,
)
from solver.meanfield import MeanFieldSolution
from solver.numerics import HalfStepTable, TimeGrid, Trajectory, discount_weights, integrate_ode

logger = logging.getLogger(__name__)

BOX_WIDTH = 8.0
DEFAULT_NODES = 401
MAX_DIM = 2


def _check_dim(m):
    if m > MAX_DIM:
        raise SpecError("quadrature restricted to m <= 2")


@dataclass(frozen=True)
class GridDensity:
    lo: np.ndarray
    hi: np.ndarray
    nodes: tuple
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))
        object.__setattr__(self, "nodes", tuple(int(v) for v in np.atleast_1d(self.nodes)))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        _check_dim(self.dim)
        if self.values.shape != self.nodes:
            raise SpecError(f"density values have shape {self.values.shape}, expected {self.nodes}")
        if np.any(self.values < 0):
            raise SpecError("density values must be nonnegative")

    @property
    def dim(self):
        return self.lo.size

    @property
    def axes(self):
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lo, self.hi, self.nodes)]

    def points(self):
        """Grid points, shape nodes + (m,)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def same_grid(self, other):
        return self.nodes == tuple(other.nodes) and np.array_equal(self.lo, other.lo) \
            and np.array_equal(self.hi, other.hi)

    def integrate(self, arr):
        """Tensor-product trapezoid over the leading grid axes."""
        out = np.asarray(arr, dtype=float)
        for axis in self.axes:
            out = trapezoid(out, axis, axis=0)
        return out

    def integral(self):
        return float(self.integrate(self.values))

    def first_moment(self):
        return self.integrate(self.values[..., None] * self.points())

    def mean(self):
        return self.first_moment() / self.integral()

    def covariance(self):
        u = self.points() - self.mean()
        outer = u[..., :, None] * u[..., None, :]
        return self.integrate(self.values[..., None, None] * outer) / self.integral()

    def quadratic_moment(self, R):
        """integral of (1/2) u^T R u phi(u) du."""
        u = self.points()
        return float(self.integrate(0.5 * np.einsum('...i,ij,...j->...', u, R, u) * self.values))

    def neg_entropy(self):
        """integral of phi ln phi, with 0 ln 0 = 0."""
        v = self.values
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)
        return float(self.integrate(plogp))

    def entropy(self):
        return -self.neg_entropy()

    def normalize(self):
        total = self.integral()
        if not total > 0:
            raise QuadratureError("cannot normalize a density with zero mass")
        return GridDensity(self.lo, self.hi, self.nodes, self.values / total, normalized=True)


@dataclass(frozen=True)
class Direction:
    lo: np.ndarray
    hi: np.ndarray
    nodes: tuple
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise SpecError("direction must be bounded")

    @classmethod
    def on(cls, density: GridDensity, values):
        return cls(density.lo, density.hi, density.nodes, values)

    @property
    def sup_norm(self):
        return float(np.max(np.abs(self.values), initial=0.0))


def gaussian_density(mean, cov, nodes=DEFAULT_NODES, width=BOX_WIDTH) -> GridDensity:
    """N(mean, cov) on a box of +-width standard deviations, renormalised on the grid."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    _check_dim(mean.size)
    sd = np.sqrt(np.diag(cov))
    if np.any(sd <= 0):
        raise DegeneratePolicyError("a Dirac policy has no grid density")
    shape = (nodes,) * mean.size
    lo, hi = mean - width * sd, mean + width * sd
    grid = GridDensity(lo, hi, shape, np.zeros(shape))
    values = gaussian_pdf(grid.points(), mean, cov)
    return GridDensity(lo, hi, shape, values).normalize()


def perturb_density(phi: GridDensity, omega: Direction, eps) -> GridDensity:
    """Pointwise e^{eps omega(u)} phi(u); the normalized flag is cleared."""
    if not phi.same_grid(omega):
        raise SpecError("density and direction live on different grids")
    with np.errstate(over="ignore", invalid="ignore"):
        values = phi.values * np.exp(eps * omega.values)
    if not np.all(np.isfinite(values)):
        raise QuadratureError("overflow in perturbed density", detail={"eps": float(eps)})
    return GridDensity(phi.lo, phi.hi, phi.nodes, values, normalized=False)


def _exogenous(mf: MeanFieldSolution, k, spec: PopulationSpec, times):
    """Fbar xbar(t) + Hbar mubar(t) + b(t) at the given times."""
    mf.grid.check(times)
    xbar = mf.xbar.spline()(times)
    mubar = mf.mubar.spline()(times)
    return xbar @ spec.Fbar(k).T + mubar @ spec.Hbar(k).T + spec.subpops[k].b.sample(times)


def mean_state_path(means, mf: MeanFieldSolution, k, spec: PopulationSpec, grid: TimeGrid, x0=None) -> Trajectory:
    """Deterministic mean state driven by density means given at the grid nodes."""
    p = spec.subpops[k]
    means = np.asarray(means, dtype=float).reshape(grid.steps + 1, -1)
    half_means = np.empty((2 * grid.steps + 1, means.shape[1]))
    half_means[0::2] = means
    half_means[1::2] = 0.5 * (means[:-1] + means[1:])
    mu = HalfStepTable(grid, half_means)
    ext = HalfStepTable(grid, _exogenous(mf, k, spec, grid.half_times))
    x0 = spec.x0_mean if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    return integrate_ode(lambda t, x: p.A @ x + p.B @ mu(t) + ext(t), x0, grid)


def optimal_density_path(mf: MeanFieldSolution, k, spec: PopulationSpec, grid: TimeGrid,
                         x0=None, nodes=DEFAULT_NODES):
    """Gaussian optimal densities along the deterministic closed-loop mean path.

    Returns (density_path, state_path, means).
    """
    p = spec.subpops[k]
    ext = HalfStepTable(grid, _exogenous(mf, k, spec, grid.half_times))
    x0 = spec.x0_mean if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    state = integrate_ode(
        lambda t, x: p.A @ x + p.B @ classical_control(t, x, mf, k) + ext(t), x0, grid)
    means = np.stack([classical_control(t, state.values[j], mf, k) for j, t in enumerate(grid.times)])
    cov = p.exploration_cov
    path = [gaussian_density(mu, cov, nodes=nodes) for mu in means]
    return path, state, means


def shifted_density_path(means, cov, shift=0.0, scale=1.0, nodes=DEFAULT_NODES):
    """Gaussians N(mean + shift, scale * cov) at every node."""
    cov = np.atleast_2d(cov) * scale
    return [gaussian_density(np.atleast_1d(mu) + shift, cov, nodes=nodes) for mu in means]


def _check_state_path(state: Trajectory, means, mf, k, spec, grid, tol=1e-2):
    p = spec.subpops[k]
    x = state.values
    ext = _exogenous(mf, k, spec, grid.times)
    drift = x @ p.A.T + means @ p.B.T + ext
    slope = np.diff(x, axis=0) / grid.dt
    defect = np.max(np.abs(slope - 0.5 * (drift[:-1] + drift[1:])), initial=0.0)
    if defect > tol * (1.0 + np.max(np.abs(drift), initial=0.0)):
        raise SpecError("state path inconsistent with density means", detail={"defect": float(defect)})


def exploratory_cost_quadrature(density_path, state_path: Trajectory, mf: MeanFieldSolution, k,
                                spec: PopulationSpec, grid: TimeGrid, include_tail=False,
                                check_state=True) -> float:
    """Discounted trapezoid-in-time integral of the entropy-regularised running cost,
    u-integrals by tensor trapezoid, including the phi_k (integral - 1) term.

    include_tail adds e^{-rho T} (1/2 x_T^T Pi x_T + s(T)^T x_T), the continuation
    value up to a density-independent constant.
    """
    p = spec.subpops[k]
    _check_dim(p.m)
    if len(density_path) != grid.steps + 1:
        raise SpecError("density path must have one density per grid node")
    if state_path.grid != grid:
        raise SpecError("state path must live on the cost grid")
    x = state_path.values
    if check_state:
        means = np.stack([d.first_moment() for d in density_path])
        _check_state_path(state_path, means, mf, k, spec, grid)
    y = mf.xbar.spline()(grid.times) @ spec.psibar(k).T
    dev = x - y
    running = np.empty(grid.steps + 1)
    for j, dens in enumerate(density_path):
        mass = dens.integral()
        first = dens.first_moment()
        running[j] = (
            0.5 * dev[j] @ p.Q @ dev[j]
            + p.eta @ dev[j]
            + p.phi_lagrange * (mass - 1.0)
            + (dev[j] @ p.S + p.nvec) @ first
            + dens.quadratic_moment(p.R)
            + p.lambda_explore * dens.neg_entropy()
        )
    cost = float(discount_weights(grid, spec.rho) @ running)
    if include_tail:
        xT = x[-1]
        tail = 0.5 * xT @ mf.Pi_at(k, grid.t1) @ xT + mf.s_at(k, grid.t1) @ xT
        cost += float(np.exp(-spec.rho * grid.t1) * tail)
    return cost


def path_cost(density_path, mf, k, spec, grid, x0=None, include_tail=False):
    """Cost of a density path with the state re-solved from its means."""
    means = np.stack([d.first_moment() for d in density_path])
    state = mean_state_path(means, mf, k, spec, grid, x0=x0)
    return exploratory_cost_quadrature(density_path, state, mf, k, spec, grid,
                                       include_tail=include_tail, check_state=False)


def gateaux_derivative(phi_path, omega_path, mf: MeanFieldSolution, k, spec: PopulationSpec, eps,
                       grid: TimeGrid, x0=None, include_tail=True) -> float:
    """Central difference [J(phi^{+eps}) - J(phi^{-eps})] / (2 eps) along e^{eps omega} phi."""
    if spec.subpops[k].m != 1:
        raise SpecError("Gateaux check supports scalar controls only")
    if len(phi_path) != len(omega_path):
        raise SpecError("density and direction paths differ in length")
    costs = []
    for sign in (1.0, -1.0):
        perturbed = [perturb_density(phi, om, sign * eps) for phi, om in zip(phi_path, omega_path)]
        costs.append(path_cost(perturbed, mf, k, spec, grid, x0=x0, include_tail=include_tail))
    return (costs[0] - costs[1]) / (2.0 * eps)


def _center(values, phi: GridDensity):
    return values - phi.integrate(values * phi.values) / phi.integral()


def admissible_direction_path(phi_path, rng, modes=3):
    """Smooth bounded random directions with integral omega phi du = 0 at every node."""
    amps = rng.standard_normal(modes) / np.arange(1, modes + 1)
    freqs = rng.uniform(0.3, 1.5, size=modes)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=modes)
    out = []
    for phi in phi_path:
        v = (phi.points()[..., 0] - phi.mean()[0]) / np.sqrt(phi.covariance()[0, 0])
        values = sum(a * np.cos(f * v + ph) for a, f, ph in zip(amps, freqs, phases))
        out.append(Direction.on(phi, _center(values, phi)))
    return out


def mean_shift_direction_path(phi_path, targets):
    """omega_t(u) = (target_t - mean_t)^T Sigma_t^-1 (u - mean_t): moves each mean toward its target."""
    out = []
    for phi, target in zip(phi_path, targets):
        mean = phi.mean()
        gap = np.atleast_1d(target) - mean
        weights = np.linalg.solve(phi.covariance(), gap)
        values = (phi.points() - mean) @ weights
        out.append(Direction.on(phi, _center(values, phi)))
    return out


def zero_direction_path(phi_path):
    return [Direction.on(phi, np.zeros(phi.nodes)) for phi in phi_path]


@dataclass(frozen=True)
class EntropyAudit:
    k: int
    lambda_explore: float
    entropy_closed_form: float
    entropy_quadrature: float
    discounted_standard: float
    discounted_display: float
    discounted_quadrature: float
    discrepancy: float
    value_gap: float
    value_gap_standard: float

    def to_dict(self):
        return dict(self.__dict__)


def entropy_audit(k, spec: PopulationSpec, nodes=DEFAULT_NODES) -> EntropyAudit:
    """Discounted entropy term three ways: the Gaussian identity
    -(lambda/2rho)(ln det(2 pi lambda R^-1) + m), the displayed
    (lambda/2rho) ln det(2 pi lambda R^-1), and grid quadrature."""
    p = spec.subpops[k]
    lam, rho, m = p.lambda_explore, spec.rho, p.m
    closed = policy_entropy(k, spec)
    quad = gaussian_density(np.zeros(m), p.exploration_cov, nodes=nodes).entropy()
    _, logdet = np.linalg.slogdet(2.0 * np.pi * p.exploration_cov)
    standard = -lam / (2.0 * rho) * (logdet + m)
    display = lam / (2.0 * rho) * logdet
    return EntropyAudit(
        k=k,
        lambda_explore=lam,
        entropy_closed_form=closed,
        entropy_quadrature=quad,
        discounted_standard=standard,
        discounted_display=display,
        discounted_quadrature=-lam * quad / rho,
        discrepancy=display - standard,
        value_gap=value_gap(k, spec),
        value_gap_standard=value_gap_standard(k, spec),
    )
