"""Game specification: sub-population parameters, mixture weights, assumption checks.

Type indices are 0-based throughout the package.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import SpecError

logger = logging.getLogger(__name__)

PSD_FLOOR = 1e-10
PI_SUM_TOL = 1e-12


def _frozen_array(value, ndim):
    arr = np.array(value, dtype=float)
    if arr.ndim == 0 and ndim > 0:
        arr = arr.reshape((1,) * ndim)
    elif arr.ndim == 1 and ndim == 2:
        arr = arr.reshape(-1, 1)
    arr.setflags(write=False)
    return arr


def eig_floor(M):
    return -PSD_FLOOR * (1.0 + np.linalg.norm(M))


def is_symmetric(M):
    M = np.asarray(M, dtype=float)
    return M.ndim == 2 and M.shape[0] == M.shape[1] and (
        np.max(np.abs(M - M.T), initial=0.0) <= PSD_FLOOR * (1.0 + np.linalg.norm(M))
    )


def min_eigenvalue(M):
    M = np.asarray(M, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def is_psd(M):
    return is_symmetric(M) and min_eigenvalue(M) >= eig_floor(M)


def is_pd(M):
    return is_symmetric(M) and min_eigenvalue(M) > -eig_floor(M)


@dataclass(frozen=True)
class DriftTable:
    """Deterministic drift offset b(t): constant, piecewise-constant or affine in t."""

    kind: str
    values: np.ndarray
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slope: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "piecewise", "affine"):
            raise SpecError(f"unknown drift kind {self.kind!r}")
        object.__setattr__(self, "values", _frozen_array(self.values, 2 if self.kind == "piecewise" else 1))
        object.__setattr__(self, "times", _frozen_array(self.times, 1))
        if self.slope is not None:
            object.__setattr__(self, "slope", _frozen_array(self.slope, 1))
        if self.kind == "piecewise":
            if self.values.shape[0] != self.times.shape[0] or self.times.size == 0:
                raise SpecError("piecewise drift needs one value row per breakpoint")
            if np.any(np.diff(self.times) <= 0):
                raise SpecError("piecewise drift breakpoints must increase")
        if self.kind == "affine":
            if self.slope is None or self.slope.shape != self.values.shape:
                raise SpecError("affine drift needs a slope of the intercept's shape")

    @classmethod
    def zeros(cls, n):
        return cls("constant", np.zeros(n))

    @classmethod
    def constant(cls, value):
        return cls("constant", np.atleast_1d(np.asarray(value, dtype=float)))

    @property
    def dim(self):
        return self.values.shape[-1]

    @property
    def is_constant(self):
        if self.kind == "constant":
            return True
        if self.kind == "affine":
            return not np.any(self.slope)
        return bool(np.all(self.values == self.values[0]))

    def at(self, t):
        if self.kind == "constant":
            return self.values.copy()
        if self.kind == "affine":
            return self.values + self.slope * t
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.values[max(int(idx), 0)].copy()

    def sample(self, times):
        times = np.asarray(times, dtype=float)
        if self.kind == "constant":
            return np.broadcast_to(self.values, times.shape + self.values.shape).copy()
        if self.kind == "affine":
            return self.values[None, :] + times[:, None] * self.slope[None, :]
        idx = np.clip(np.searchsorted(self.times, times, side="right") - 1, 0, None)
        return self.values[idx]


@dataclass(frozen=True)
class SubpopParams:
    A: np.ndarray
    B: np.ndarray
    F: np.ndarray
    H: np.ndarray
    D: np.ndarray
    b: DriftTable
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    eta: np.ndarray
    nvec: np.ndarray
    psi: np.ndarray
    lambda_explore: float = 0.0
    phi_lagrange: float = 0.0

    def __post_init__(self):
        for name in ("A", "B", "F", "H", "D", "Q", "R", "S", "psi"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), 2))
        for name in ("eta", "nvec"):
            object.__setattr__(self, name, _frozen_array(np.atleast_1d(getattr(self, name)), 1))
        if not isinstance(self.b, DriftTable):
            object.__setattr__(self, "b", DriftTable.constant(self.b))
        object.__setattr__(self, "lambda_explore", float(self.lambda_explore))
        object.__setattr__(self, "phi_lagrange", float(self.phi_lagrange))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def r(self):
        return self.D.shape[1]

    @property
    def Rinv(self):
        return np.linalg.inv(self.R)

    @property
    def exploration_cov(self):
        return self.lambda_explore * self.Rinv

    def replace(self, **changes):
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return SubpopParams(**values)


@dataclass(frozen=True)
class PopulationSpec:
    subpops: tuple
    pi: np.ndarray
    rho: float
    x0_mean: np.ndarray
    x0_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "subpops", tuple(self.subpops))
        object.__setattr__(self, "pi", _frozen_array(np.atleast_1d(self.pi), 1))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "x0_mean", _frozen_array(np.atleast_1d(self.x0_mean), 1))
        object.__setattr__(self, "x0_cov", _frozen_array(self.x0_cov, 2))

    @property
    def K(self):
        return len(self.subpops)

    @property
    def n(self):
        return self.subpops[0].n

    @property
    def m(self):
        return self.subpops[0].m

    @property
    def r(self):
        return self.subpops[0].r

    def expand(self, block):
        """Block row [pi_1*block, ..., pi_K*block]; couples a type to the stacked mean vector."""
        return np.kron(self.pi[None, :], np.asarray(block, dtype=float))

    def Fbar(self, k):
        return self.expand(self.subpops[k].F)

    def Hbar(self, k):
        return self.expand(self.subpops[k].H)

    def psibar(self, k):
        return self.expand(self.subpops[k].psi)

    def stacked_x0(self):
        return np.tile(self.x0_mean, self.K)

    def replace(self, **changes):
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return PopulationSpec(**values)

    def with_subpop(self, k, **changes):
        subpops = list(self.subpops)
        subpops[k] = subpops[k].replace(**changes)
        return self.replace(subpops=tuple(subpops))


@dataclass(frozen=True)
class Violation:
    assumption_id: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self):
        return not self.violations

    def messages(self):
        return [f"[{v.assumption_id}] {v.message}" for v in self.violations]

    def to_dict(self):
        return {
            "ok": self.ok,
            "violations": [{"assumption": v.assumption_id, "message": v.message} for v in self.violations],
        }

    def raise_for_violations(self):
        if not self.ok:
            raise SpecError("specification violates model assumptions", detail=self.to_dict())


def _check_shape(violations, label, arr, shape):
    if np.shape(arr) != shape:
        violations.append(Violation("dims", f"{label} has shape {np.shape(arr)}, expected {shape}"))
        return False
    return True


def validate_spec(spec: PopulationSpec) -> ValidationReport:
    """Report every violated checkable assumption; never raises for a violation."""
    violations = []
    if spec.K == 0:
        return ValidationReport((Violation("dims", "no sub-populations"),))
    n, m = spec.n, spec.m
    for k, p in enumerate(spec.subpops):
        tag = f"type {k}: "
        r = p.D.shape[1] if p.D.ndim == 2 else 0
        shapes_ok = all([
            _check_shape(violations, tag + "A", p.A, (n, n)),
            _check_shape(violations, tag + "B", p.B, (n, m)),
            _check_shape(violations, tag + "F", p.F, (n, n)),
            _check_shape(violations, tag + "H", p.H, (n, m)),
            _check_shape(violations, tag + "D", p.D, (n, r)),
            _check_shape(violations, tag + "Q", p.Q, (n, n)),
            _check_shape(violations, tag + "R", p.R, (m, m)),
            _check_shape(violations, tag + "S", p.S, (n, m)),
            _check_shape(violations, tag + "psi", p.psi, (n, n)),
            _check_shape(violations, tag + "eta", p.eta, (n,)),
            _check_shape(violations, tag + "nvec", p.nvec, (m,)),
        ])
        if p.b.dim != n:
            violations.append(Violation("dims", f"{tag}b has dimension {p.b.dim}, expected {n}"))
            shapes_ok = False
        if p.lambda_explore < 0:
            violations.append(Violation("lambda", f"{tag}lambda_explore is negative"))
        if not shapes_ok:
            continue
        if not is_pd(p.R):
            violations.append(Violation("A3", f"{tag}R not positive definite"))
            continue
        gap = p.Q - p.S @ np.linalg.solve(p.R, p.S.T)
        if not is_psd(gap):
            violations.append(Violation("A3", f"{tag}Q - S R^-1 S^T not positive semidefinite"))
    if spec.pi.shape != (spec.K,):
        violations.append(Violation("A2", f"mixture weights have length {spec.pi.size}, expected {spec.K}"))
    else:
        if np.any(spec.pi < 0):
            violations.append(Violation("A2", "mixture weights must be nonnegative"))
        total = float(np.sum(spec.pi))
        if abs(total - 1.0) > PI_SUM_TOL:
            violations.append(Violation("A2", f"mixture weights sum to {total:.15g}, not 1"))
    if not spec.rho > 0:
        violations.append(Violation("rho", "discount rho must be positive"))
    if _check_shape(violations, "x0_mean", spec.x0_mean, (n,)) and \
            _check_shape(violations, "x0_cov", spec.x0_cov, (n, n)):
        if not is_psd(spec.x0_cov):
            violations.append(Violation("A1", "x0_cov not symmetric positive semidefinite"))
    return ValidationReport(tuple(violations))


def mixture_weights(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 1 or np.any(counts < 0):
        raise SpecError("agent counts must be a vector of nonnegative numbers")
    total = counts.sum()
    if total <= 0:
        raise SpecError("empty population")
    return counts / total


def selector_matrix(k: int, n: int, K: int) -> np.ndarray:
    """e_k: n x nK block row with the identity in block k (0-based)."""
    if not 0 <= k < K:
        raise SpecError(f"type index {k} out of range for K={K}")
    e = np.zeros((n, n * K))
    e[:, k * n:(k + 1) * n] = np.eye(n)
    return e


def exact_counts(pi, N):
    """Agent counts per type; must reproduce pi exactly."""
    counts = np.rint(np.asarray(pi, dtype=float) * N).astype(int)
    if counts.sum() != N or np.max(np.abs(counts / N - pi)) > 1e-12:
        raise SpecError(f"N={N} cannot realise the mixture weights exactly")
    return counts
