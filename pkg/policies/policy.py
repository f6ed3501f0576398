"""Classical optimal control and the optimal exploratory Gaussian distribution.

The exploratory mean is the classical control; the covariance is lambda_k R_k^-1,
independent of state and time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from core.exceptions import DegeneratePolicyError, SpecError
from games.specs import PopulationSpec
from solver.meanfield import MeanFieldSolution
from solver.numerics import psd_factor, sample_gaussian


@dataclass(frozen=True)
class PolicyPoint:
    mean: np.ndarray
    covariance: np.ndarray


def classical_control(t, x, mf: MeanFieldSolution, k):
    """u* = -R^-1 [(B^T Pi + S^T) x + B^T s(t) - S^T psibar xbar(t) + n].

    x may be a single state (n,) or a batch (N, n).
    """
    spec = mf.spec
    p = spec.subpops[k]
    Pi = mf.Pi_at(k, t)
    offset = p.B.T @ mf.s_at(k, t) - p.S.T @ (spec.psibar(k) @ mf.xbar_at(t)) + p.nvec
    gain = p.B.T @ Pi + p.S.T
    x = np.asarray(x, dtype=float)
    return -(x @ gain.T + offset) @ p.Rinv.T


def exploratory_policy(t, x, mf: MeanFieldSolution, k) -> PolicyPoint:
    mean = classical_control(t, x, mf, k)
    return PolicyPoint(mean=mean, covariance=mf.spec.subpops[k].exploration_cov)


def sample_action(point: PolicyPoint, rng):
    return sample_gaussian(point.mean, point.covariance, rng)


@dataclass(frozen=True)
class GaussianPolicy:
    """Optimal control distribution of type k built on a solved mean field."""

    mf: MeanFieldSolution
    k: int

    @property
    def params(self):
        return self.mf.spec.subpops[self.k]

    @property
    def covariance(self):
        return self.params.exploration_cov

    @property
    def factor(self):
        return psd_factor(self.covariance)

    @property
    def is_dirac(self):
        return self.params.lambda_explore == 0.0

    def Pi(self, t=0.0):
        return self.mf.Pi_at(self.k, t)

    def s_of_t(self, t):
        return self.mf.s_at(self.k, t)

    def xbar_of_t(self, t):
        return self.mf.xbar_at(t)

    def mean(self, t, x):
        return classical_control(t, x, self.mf, self.k)

    def at(self, t, x) -> PolicyPoint:
        return exploratory_policy(t, x, self.mf, self.k)

    def sample(self, t, x, rng):
        return sample_action(self.at(t, x), rng)

    def density(self, u, t, x):
        return gaussian_pdf(u, self.mean(t, x), self.covariance)


def gaussian_pdf(u, mean, cov):
    """Density of N(mean, cov) at points u of shape (..., m)."""
    u = np.asarray(u, dtype=float)
    mean = np.atleast_1d(mean)
    cov = np.atleast_2d(cov)
    sign, logdet = np.linalg.slogdet(2.0 * np.pi * cov)
    if sign <= 0:
        raise DegeneratePolicyError("density undefined for a singular covariance")
    diff = u - mean
    quad = np.einsum('...i,ij,...j->...', diff, np.linalg.inv(cov), diff)
    return np.exp(-0.5 * quad - 0.5 * logdet)


def _lambda_rho(k, spec: PopulationSpec):
    p = spec.subpops[k]
    return p, p.lambda_explore, spec.rho


def _logdet_2pi_cov(p):
    sign, logdet = np.linalg.slogdet(2.0 * np.pi * p.exploration_cov)
    if sign <= 0:
        raise DegeneratePolicyError("covariance lambda R^-1 is singular")
    return logdet


def policy_entropy(k, spec: PopulationSpec) -> float:
    """Differential entropy (1/2) ln det(2 pi e lambda_k R_k^-1)."""
    p, lam, _ = _lambda_rho(k, spec)
    if lam <= 0:
        raise DegeneratePolicyError("entropy undefined (Dirac)")
    return 0.5 * (_logdet_2pi_cov(p) + p.m)


def analytic_coe(k, spec: PopulationSpec) -> float:
    """Cost of exploration m lambda_k / (2 rho)."""
    p, lam, rho = _lambda_rho(k, spec)
    if rho <= 0:
        raise SpecError("cost of exploration needs rho > 0")
    return p.m * lam / (2.0 * rho)


def value_gap(k, spec: PopulationSpec) -> float:
    """(lambda_k / 2 rho) (ln det(2 pi lambda_k R_k^-1) - m)."""
    p, lam, rho = _lambda_rho(k, spec)
    if rho <= 0:
        raise SpecError("value gap needs rho > 0")
    if lam <= 0:
        raise SpecError("value gap needs lambda_explore > 0")
    return lam / (2.0 * rho) * (_logdet_2pi_cov(p) - p.m)


def value_gap_standard(k, spec: PopulationSpec) -> float:
    """Classical minus exploratory value from the Gaussian entropy identity:
    (lambda_k / 2 rho) ln det(2 pi lambda_k R_k^-1)."""
    p, lam, rho = _lambda_rho(k, spec)
    if rho <= 0:
        raise SpecError("value gap needs rho > 0")
    if lam <= 0:
        raise SpecError("value gap needs lambda_explore > 0")
    return lam / (2.0 * rho) * _logdet_2pi_cov(p)
