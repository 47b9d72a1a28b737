"""Small problem builders shared by the tests."""

import numpy as np

from bhjb.grid import SpatialGrid
from bhjb.problem import CoefficientField, ControlProblem, ControlSet, InitialLaw, SpatialDomain
from bhjb.tree import ScenarioTree

UNIT = SpatialDomain((0.0,), (1.0,))


def n_of(x):
    return np.asarray(x).shape[0]


def const_b(val, n=1):
    return lambda x, v, z, t: np.broadcast_to(val * np.eye(n), (n_of(x), n, n)).copy()


def zero_f(n=1):
    return lambda x, v, z, t: np.zeros((n_of(x), n))


def const_phi(val):
    return lambda x, v, z, t: np.full(n_of(x), float(val))


def scalar(v):
    return float(np.ravel(v)[0])


def problem_1d(drift=None, diffusion=None, cost=None, controls=((0.0,),), horizon=1.0, law=None, domain=UNIT,
               name="test", z_dim=1):
    coef = CoefficientField(drift or zero_f(), diffusion or const_b(0.5), cost or const_phi(1.0), z_dim=z_dim)
    return ControlProblem(domain, horizon, coef, ControlSet(np.asarray(controls, dtype=float)),
                          law or InitialLaw.uniform(), name=name)


def exit_time_problem(horizon=5.0, law=None):
    return problem_1d(horizon=horizon, law=law, name="exit")


def chain(horizon, levels, z=0.0):
    return ScenarioTree.uniform_chain(horizon, levels, z)


def grid_1d(n, domain=UNIT):
    return SpatialGrid.from_domain(domain, (n,))
