"""Small reference games used by the test suites and the example spec files."""
import numpy as np

from games.specs import DriftTable, PopulationSpec, SubpopParams


def scalar_subpop(A=0.0, B=1.0, Q=1.0, R=1.0, S=0.0, F=0.0, H=0.0, D=0.0, b=0.0,
                  eta=0.0, nvec=0.0, psi=0.0, lambda_explore=0.0, phi_lagrange=0.0):
    return SubpopParams(
        A=[[A]], B=[[B]], F=[[F]], H=[[H]], D=[[D]], b=DriftTable.constant(b),
        Q=[[Q]], R=[[R]], S=[[S]], eta=[eta], nvec=[nvec], psi=[[psi]],
        lambda_explore=lambda_explore, phi_lagrange=phi_lagrange,
    )


def scalar_spec(rho=0.5, x0=0.0, x0_var=0.0, **subpop):
    return PopulationSpec(
        subpops=(scalar_subpop(**subpop),),
        pi=[1.0],
        rho=rho,
        x0_mean=[x0],
        x0_cov=[[x0_var]],
    )


def coupled_spec(rho=0.5, lambda_explore=0.1):
    """Single type whose drift and tracking target follow the population mean."""
    return scalar_spec(rho=rho, x0=1.0, x0_var=0.25, A=-0.2, F=0.5, H=0.2, psi=0.5, D=0.3,
                       b=0.1, eta=0.1, lambda_explore=lambda_explore)


def two_type_spec(rho=0.5):
    first = scalar_subpop(A=-0.1, F=0.3, H=0.1, psi=0.4, D=0.2, b=0.2, lambda_explore=0.1)
    second = scalar_subpop(A=0.1, Q=2.0, R=0.5, F=0.2, psi=0.2, D=0.2, eta=0.1, nvec=0.1, lambda_explore=0.2)
    return PopulationSpec(subpops=(first, second), pi=[0.5, 0.5], rho=rho,
                          x0_mean=[0.5], x0_cov=[[0.1]])


def vector_spec(rho=0.5, lambda_explore=0.2):
    """n = m = 2, decoupled, used to check dimension factors."""
    sub = SubpopParams(
        A=np.zeros((2, 2)), B=np.eye(2), F=np.zeros((2, 2)), H=np.zeros((2, 2)), D=0.2 * np.eye(2),
        b=DriftTable.zeros(2), Q=np.eye(2), R=np.eye(2), S=np.zeros((2, 2)), eta=np.zeros(2),
        nvec=np.zeros(2), psi=np.zeros((2, 2)), lambda_explore=lambda_explore,
    )
    return PopulationSpec(subpops=(sub,), pi=[1.0], rho=rho, x0_mean=np.zeros(2), x0_cov=np.zeros((2, 2)))
