"""Backward HJB sweep with per-node Howard policy iteration.

At node ``n`` of level ``k`` the future value ``W = E[V_{k+1} | n]`` is fixed
and the step

    V = W + dt * min_v [theta A_v V + (1 - theta) A_v W + phi_v]

is solved by alternating a linear theta step for the current policy with a
pointwise greedy update.  Controls change only on strict improvement, so
the iteration cannot cycle between tied controls.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import pde
from .cordes import CaseIIIParams, certify
from .errors import ConvergenceError, CordesRefusal
from .fields import PolicyField, ValueField
from .tree import conditional_expectation

MAX_CORDES_Z = 64


@dataclass
class HjbSolveReport:
    """``iterations`` has one Howard count per non-leaf node, in node order."""

    residual: float
    iterations: np.ndarray
    theta: float
    monotone: bool
    wall_time: float
    cordes: dict | None = None
    flags: dict = field(default_factory=dict)

    @property
    def max_iterations(self):
        return int(self.iterations.max(initial=0))

    def to_dict(self, with_time=False):
        out = {
            "residual": self.residual,
            "policy_iterations": {
                "total": int(self.iterations.sum()),
                "max": self.max_iterations,
                "mean": float(self.iterations.mean()) if self.iterations.size else 0.0,
            },
            "theta": self.theta,
            "monotone": self.monotone,
            "cordes": self.cordes,
            "flags": dict(self.flags),
        }
        if with_time:
            out["wall_time"] = self.wall_time
        return out


def _cordes_z(tree):
    z = np.unique(tree.z, axis=0)
    if z.shape[0] > MAX_CORDES_Z:
        z = z[np.linspace(0, z.shape[0] - 1, MAX_CORDES_Z).round().astype(int)]
    return z


def hamiltonians(stencils, costs, v_full, w_full, hw, theta, grid):
    """``theta A_v V + (1 - theta) A_v W + phi_v`` for all controls, ``(M, P)``."""
    h = costs.copy()
    if theta > 0:
        h += theta * pde.apply_stencil(stencils, v_full, grid)
    if theta < 1:
        h += (1.0 - theta) * hw
    return h


def _improve(h, idx, rel_eps=1e-12):
    ar = np.arange(idx.size)
    best = np.argmin(h, axis=0)
    cur = h[idx, ar]
    eps = rel_eps * max(1.0, float(np.max(np.abs(h))))
    better = h[best, ar] < cur - eps
    return np.where(better, best, idx), int(better.sum())


def howard_step(stencils, costs, w_full, dt, theta, grid, tol, max_iters, start=None):
    """Solve one node's HJB step.  Returns ``(V_interior, policy, iterations)``."""
    p = grid.n_interior
    ar = np.arange(p)
    hw = pde.apply_stencil(stencils, w_full, grid) if theta < 1 else None
    if start is None:
        idx = np.argmin(pde.apply_stencil(stencils, w_full, grid) + costs, axis=0)
    else:
        idx = start
    prev = None
    change = np.inf
    for it in range(1, max_iters + 1):
        coef, phi = stencils[idx, ar], costs[idx, ar]
        v = pde.theta_step(coef, w_full, phi, dt, theta, grid)
        if theta == 0.0:
            return v, idx, it
        change = np.inf if prev is None else float(np.max(np.abs(v - prev)))
        h = hamiltonians(stencils, costs, grid.embed(v), w_full, hw, theta, grid)
        new, moved = _improve(h, idx)
        if moved == 0 or change < tol:
            return v, idx, it
        idx, prev = new, v
    raise ConvergenceError(
        f"policy iteration did not converge in {max_iters} iterations (last change {change:.3g})", residual=change
    )


def solve_hjb(problem, tree, grid, theta=1.0, policy_iter_tol=1e-10, max_policy_iters=100, cordes_case="auto",
              override_cordes=False, cordes_budget=256, case_iii=None, threads=1, bbar=None, bhat=None):
    """Value function, optimal feedback policy and a solve report.

    Refuses problems whose Cordes check fails unless ``override_cordes``;
    ``cordes_case="skip"`` leaves the check out entirely.
    """
    if not policy_iter_tol > 0:
        raise ValueError("policy_iter_tol must be positive")
    if max_policy_iters < 1:
        raise ValueError("max_policy_iters must be >= 1")
    start = time.perf_counter()
    pde.ensure_valid(problem, tree)
    pde._check_grid(problem, grid)
    cordes_dict = None
    if cordes_case != "skip":
        if case_iii is not None and not isinstance(case_iii, CaseIIIParams):
            case_iii = CaseIIIParams(*case_iii)
        rep = certify(problem, case=cordes_case, budget=cordes_budget, case_iii=case_iii, z_values=_cordes_z(tree),
                      bbar=bbar, bhat=bhat)
        cordes_dict = rep.to_dict()
        if not rep.passed and not override_cordes:
            raise CordesRefusal(f"Cordes check failed ({rep.line()}); pass override to solve anyway", report=rep)

    ops = pde.NodeOperators(problem, grid)
    V = ValueField.zeros(tree, grid, scheme=f"theta={theta:g}", problem_name=problem.name)
    U = PolicyField.constant(tree, grid, len(problem.controls))
    iters = np.zeros(tree.n_nodes, dtype=np.int64)
    residual = 0.0
    monotone = True

    for k in range(tree.n_levels - 1, -1, -1):
        dt, t = tree.dt(k), float(tree.times[k])

        def step(node, dt=dt, t=t):
            nonlocal monotone
            w = conditional_expectation(tree, V.values, node)
            st, cost = ops.get(tree.z[node], t)
            if monotone and not pde.is_monotone(st, grid):
                monotone = False
            v, idx, it = howard_step(st, cost, w, dt, theta, grid, policy_iter_tol, max_policy_iters)
            V.values[node] = grid.embed(v)
            U.indices[node] = grid.embed(idx)
            iters[node] = it

        pde.map_nodes(step, tree.by_level[k], threads)

    residual = local_residual(V, U, problem, tree, grid, theta, ops=ops)
    stepped = iters[tree.level < tree.n_levels]
    report = HjbSolveReport(residual, stepped, theta, monotone, time.perf_counter() - start, cordes_dict,
                            flags={"cordes_override": bool(override_cordes), "threads": int(threads)})
    return V, U, report


def local_residual(V, policy, problem, tree, grid, theta=1.0, ops=None):
    """max |one frozen-policy step from V's own children - V| over all nodes."""
    ops = ops or pde.NodeOperators(problem, grid)
    worst = 0.0
    for k in range(tree.n_levels):
        dt, t = tree.dt(k), float(tree.times[k])
        for node in tree.by_level[k]:
            w = conditional_expectation(tree, V.values, node)
            st, cost = ops.get(tree.z[node], t)
            coef, phi = pde.select_control(st, cost, policy, node)
            v = pde.theta_step(coef, w, phi, dt, theta, grid)
            worst = max(worst, float(np.max(np.abs(v - grid.interior(V.values[node])))))
    return worst


def equation_residual(V, policy, problem, tree, grid, theta=1.0):
    """max over nodes of ``|(I - theta dt A) V_n - W - (1 - theta) dt A W - dt phi|``.

    The operator is applied to ``V`` directly, so unlike :func:`local_residual`
    this does not go through the linear solver.
    """
    ops = pde.NodeOperators(problem, grid)
    worst = 0.0
    for k in range(tree.n_levels):
        dt, t = tree.dt(k), float(tree.times[k])
        for node in tree.by_level[k]:
            w = conditional_expectation(tree, V.values, node)
            st, cost = ops.get(tree.z[node], t)
            coef, phi = pde.select_control(st, cost, policy, node)
            v = V.values[node]
            lhs = grid.interior(v) - theta * dt * pde.apply_stencil(coef, v, grid)
            rhs = grid.interior(w) + dt * phi
            if theta < 1:
                rhs = rhs + (1 - theta) * dt * pde.apply_stencil(coef, w, grid)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def extract_policy(V: ValueField, problem, tree, theta=1.0):
    """Pointwise argmin of ``A_v V + phi_v`` (theta-weighted with the
    children's average for theta < 1); ties go to the lowest index."""
    grid = V.grid
    ops = pde.NodeOperators(problem, grid)
    U = PolicyField.constant(tree, grid, len(problem.controls))
    for k in range(tree.n_levels):
        t = float(tree.times[k])
        for node in tree.by_level[k]:
            st, cost = ops.get(tree.z[node], t)
            hw = None
            w = None
            if theta < 1:
                w = conditional_expectation(tree, V.values, node)
                hw = pde.apply_stencil(st, w, grid)
            h = hamiltonians(st, cost, V.values[node], w, hw, theta, grid)
            U.indices[node] = grid.embed(np.argmin(h, axis=0))
    return U


@dataclass
class ResidualCheck:
    residual: float
    vi_violation: float
    vi_checks: int
    vi_tol: float

    @property
    def vi_passed(self):
        return self.vi_violation <= self.vi_tol

    def __float__(self):
        return self.residual

    def to_dict(self):
        return {"residual": self.residual, "vi_violation": self.vi_violation, "vi_checks": self.vi_checks,
                "vi_passed": self.vi_passed}


def verify_hjb_residual(V, policy, problem, tree, grid, theta=1.0, n_checks=100, seed=0, vi_tol=1e-9):
    """Fixed-point residual with the policy frozen, plus a sampled check of
    ``H(u_hat) <= H(v) + vi_tol`` at random (point, node, control)."""
    ops = pde.NodeOperators(problem, grid)
    residual = local_residual(V, policy, problem, tree, grid, theta, ops=ops)
    rng = np.random.default_rng(seed)
    nodes = rng.integers(0, tree.n_nodes, size=n_checks)
    pts = rng.integers(0, grid.n_interior, size=n_checks)
    ctrl = rng.integers(0, len(problem.controls), size=n_checks)
    worst = -np.inf
    for node in np.unique(nodes):
        sel = nodes == node
        st, cost = ops.get(tree.z[node], float(tree.times[tree.level[node]]))
        w = hw = None
        if theta < 1:
            w = conditional_expectation(tree, V.values, node)
            hw = pde.apply_stencil(st, w, grid)
        h = hamiltonians(st, cost, V.values[node], w, hw, theta, grid)
        uh = policy.interior_indices(node)
        p = pts[sel]
        worst = max(worst, float(np.max(h[uh[p], p] - h[ctrl[sel], p])))
    return ResidualCheck(residual, worst, n_checks, vi_tol)


def value_at_initial(V: ValueField, rho):
    return pde.pair_initial(rho, V)
