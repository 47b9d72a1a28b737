"""Built-in example problems.

Every preset pins its grid, scheme and simulation settings in
``problem.meta`` so that one command reproduces the documented numbers.
"""

import re

import numpy as np

from .errors import ConfigError
from .problem import CoefficientField, ControlProblem, ControlSet, InitialLaw, SpatialDomain
from .tree import ScenarioTree

UNIT = SpatialDomain((0.0,), (1.0,))
PRESETS = ("exit-time", "bang-bang", "bounded-bhat", "two-branch-Z", "dim-reduction(N)")
# presets whose scenario tree is more than a single chain
NONTRIVIAL = ("two-branch-Z", "dim-reduction")


def _n(x):
    return np.asarray(x).shape[0]


def _const_b(value):
    return lambda x, v, z, t: np.full((_n(x), 1, 1), value)


def _ones(x, v, z, t):
    return np.ones(_n(x))


def _zero_drift(x, v, z, t):
    return np.zeros((_n(x), 1))


def _meta(**kw):
    out = {"grid": [200], "theta": 1.0, "policy_iter_tol": 1e-10, "max_policy_iters": 100, "N": 100000,
           "substeps": 4}
    out.update(kw)
    return out


def exit_time():
    """Mean exit time of ``dy = dw`` from (0, 1) truncated at T = 5."""
    coef = CoefficientField(_zero_drift, _const_b(0.5), _ones, drift_bound=0.0, diffusion_bound=0.5, cost_bound=1.0)
    prob = ControlProblem(UNIT, 5.0, coef, ControlSet([[0.0]]), InitialLaw.uniform(), name="exit-time", meta=_meta())
    return prob, ScenarioTree.uniform_chain(5.0, 500)


def bang_bang():
    """Exit time with drift ``v`` in {-1, +1}; the optimal control pushes toward the nearer wall."""
    def drift(x, v, z, t):
        return np.full((_n(x), 1), float(np.ravel(v)[0]))

    coef = CoefficientField(drift, _const_b(0.5), _ones, drift_bound=1.0, diffusion_bound=0.5, cost_bound=1.0)
    prob = ControlProblem(UNIT, 5.0, coef, ControlSet([[-1.0], [1.0]]), InitialLaw.uniform(), name="bang-bang",
                          meta=_meta())
    return prob, ScenarioTree.uniform_chain(5.0, 500)


def bounded_bhat():
    """``b(v) = 1 + v/2`` with v in {-1, +1}: control-dependent diffusion that
    satisfies the case-ii bound (S = 1/4 < C_b^2 / n = 1)."""
    def diffusion(x, v, z, t):
        return np.full((_n(x), 1, 1), 1.0 + 0.5 * float(np.ravel(v)[0]))

    coef = CoefficientField(_zero_drift, diffusion, _ones, drift_bound=0.0, diffusion_bound=1.5, cost_bound=1.0)
    prob = ControlProblem(UNIT, 1.0, coef, ControlSet([[-1.0], [1.0]]), InitialLaw.uniform(), name="bounded-bhat",
                          meta=_meta(grid=[100]))
    return prob, ScenarioTree.uniform_chain(1.0, 100)


def two_branch_z(mu=0.5):
    """Z = 0 on [0, T/2), then +1 or -1 with probability 1/2 each.

    Drift ``z (mu + v)`` and cost ``1 + z^2 v^2 / 2``: before the branching
    the dynamics do not depend on the control, afterwards the sign of Z
    flips the uncontrolled drift.
    """
    def drift(x, v, z, t):
        return np.full((_n(x), 1), float(z[0]) * (mu + float(np.ravel(v)[0])))

    def cost(x, v, z, t):
        return np.full(_n(x), 1.0 + 0.5 * float(z[0]) ** 2 * float(np.ravel(v)[0]) ** 2)

    controls = ControlSet(np.linspace(-1.0, 1.0, 5)[:, None])
    coef = CoefficientField(drift, _const_b(0.5), cost, drift_bound=1.5, diffusion_bound=0.5, cost_bound=1.5)
    prob = ControlProblem(UNIT, 2.0, coef, controls, InitialLaw.uniform(), name="two-branch-Z",
                          meta=_meta(grid=[100], branch_level=100))
    return prob, two_branch_tree(2.0, 200, 100)


def two_branch_tree(horizon, levels, branch_level, values=(1.0, -1.0), probs=(0.5, 0.5)):
    times = np.linspace(0.0, horizon, levels + 1)
    lv, z, parents, pr, ids = [], [], [], [], []
    for k in range(branch_level):
        ids.append(f"c{k}")
        lv.append(k)
        z.append([0.0])
        parents.append(k - 1)
        pr.append(1.0)
    for b, (zv, p) in enumerate(zip(values, probs)):
        for k in range(branch_level, levels + 1):
            ids.append(f"b{b}_{k}")
            lv.append(k)
            z.append([zv])
            parents.append(branch_level - 1 if k == branch_level else len(ids) - 2)
            pr.append(p if k == branch_level else 1.0)
    return ScenarioTree(times, lv, np.asarray(z), parents, pr, ids=ids, meta={"kind": "two-branch"})


def branch_chain(horizon, levels, branch_level, value):
    """The deterministic tree for one branch of :func:`two_branch_tree`."""
    z = np.where(np.arange(levels + 1) < branch_level, 0.0, value)
    return ScenarioTree.chain(np.linspace(0.0, horizon, levels + 1), z[:, None])


def dim_reduction_tree(N, scenarios=16, levels=40, horizon=1.0, kappa=1.0, seed=7):
    """Scenario fan for ``Z = C X`` with ``X`` an N-dimensional OU process.

    ``dX = -kappa X dt + dW`` is pre-simulated exactly on the level grid for
    ``scenarios`` paths and ``C = 1^T / sqrt(N)``.  The fan has
    ``1 + scenarios * levels`` nodes whatever ``N`` is.
    """
    rng = np.random.default_rng([seed, N])
    times = np.linspace(0.0, horizon, levels + 1)
    dt = horizon / levels
    a = np.exp(-kappa * dt)
    s = np.sqrt((1 - a * a) / (2 * kappa))
    X = np.zeros((scenarios, N))
    Z = np.zeros((scenarios, levels + 1))
    C = np.ones(N) / np.sqrt(N)
    for k in range(1, levels + 1):
        X = a * X + s * rng.standard_normal((scenarios, N))
        Z[:, k] = X @ C
    lv, z, parents, pr, ids = [0], [[0.0]], [-1], [1.0], ["root"]
    for j in range(scenarios):
        for k in range(1, levels + 1):
            ids.append(f"s{j}_{k}")
            lv.append(k)
            z.append([Z[j, k]])
            parents.append(0 if k == 1 else len(ids) - 2)
            pr.append(1.0 / scenarios if k == 1 else 1.0)
    return ScenarioTree(times, lv, np.asarray(z), parents, pr, ids=ids, meta={"kind": "dim-reduction", "N": N})


def dim_reduction(N=2):
    """Controlled exit problem driven by the scalar factor ``Z = C X`` of a latent N-dimensional OU state."""
    def drift(x, v, z, t):
        return np.full((_n(x), 1), float(np.ravel(v)[0]) + 0.5 * np.tanh(float(z[0])))

    def cost(x, v, z, t):
        return np.full(_n(x), 1.0 + 0.5 * float(np.ravel(v)[0]) ** 2)

    coef = CoefficientField(drift, _const_b(0.5), cost, drift_bound=1.5, diffusion_bound=0.5, cost_bound=1.5)
    prob = ControlProblem(UNIT, 1.0, coef, ControlSet([[-1.0], [0.0], [1.0]]), InitialLaw.uniform(),
                          name=f"dim-reduction({N})", meta=_meta(grid=[100], latent_dimension=N))
    return prob, dim_reduction_tree(N)


def parse_name(name):
    """``(base, N)`` for ``dim-reduction(N)`` / ``dim-reduction:N``; ``N`` is None otherwise."""
    m = re.fullmatch(r"dim-reduction(?:\((\d+)\)|:(\d+))?", name.strip())
    if m:
        return "dim-reduction", int(m.group(1) or m.group(2) or 2)
    return name.strip(), None


def preset(name):
    """``(ControlProblem, ScenarioTree)`` for a built-in preset."""
    base, N = parse_name(name)
    if base == "exit-time":
        return exit_time()
    if base == "bang-bang":
        return bang_bang()
    if base == "bounded-bhat":
        return bounded_bhat()
    if base == "two-branch-Z":
        return two_branch_z()
    if base == "dim-reduction":
        if N < 1:
            raise ConfigError("dim-reduction needs N >= 1", field="preset")
        return dim_reduction(N)
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", field="preset")


def is_nontrivial(name):
    return parse_name(name)[0] in NONTRIVIAL
