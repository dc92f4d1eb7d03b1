import numpy as np
import pytest

from sgromtr.hdm import BurgersControl, LinearDiffusion


@pytest.fixture(scope="session")
def lin():
    return LinearDiffusion()


@pytest.fixture(scope="session")
def lin_small():
    return LinearDiffusion(n_u=15)


@pytest.fixture(scope="session")
def bur():
    return BurgersControl()


@pytest.fixture(scope="session")
def lin_deterministic():
    """y-independent instance: a plain quadratic control problem."""
    return LinearDiffusion(kappa_amp=(0.0, 0.0))


def quadratic_minimizer(problem, y=None):
    """Normal-equation minimizer of F(y, .) for an affine-in-state problem."""
    from sgromtr.hdm import primal_sensitivities, solve_primal

    y = np.zeros(problem.n_y) if y is None else y
    mu0 = np.zeros(problem.n_mu)
    sol = solve_primal(problem, y, mu0)
    sens = primal_sensitivities(problem, sol.u, y, mu0)
    m = problem.h * np.eye(problem.n_u)
    a = sens.T @ m @ sens + problem.alpha * np.eye(problem.n_mu)
    b = -sens.T @ m @ (sol.u - problem.ref)
    return np.linalg.solve(a, b)
