"""Monte-Carlo evaluation of feedback policies for the killed controlled diffusion.

Paths are split into fixed-size chunks by path index; chunk ``c`` draws
from a Philox stream keyed by ``(seed, c)``.  Results therefore depend only
on the inputs and the seed, never on scheduling.

Killing uses the endpoint test plus a Brownian-bridge crossing probability
per step (``use_bridge``).  Without the bridge the exit-time cost is biased
upward by roughly ``0.58 * sqrt(2 b dt)`` per unit of boundary flux.  A path
killed during a step is charged half of that step's cost (midpoint exit).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, pde
from .fields import DensityField, PolicyField, RelaxedPolicy
from .problem import diffusion_root
from .tree import sample_paths

CHUNK = 16384


def chunk_rng(seed, chunk):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))


@dataclass
class PathEnsemble:
    """Simulated paths.  ``positions[k]`` holds states at ``t_k`` (NaN once killed)."""

    nodes: np.ndarray
    tau: np.ndarray
    cost: np.ndarray
    killed: np.ndarray
    positions: dict
    times: np.ndarray
    seed: int
    substeps: int

    @property
    def n_paths(self):
        return self.cost.size


@dataclass
class CostEstimate:
    mean: float
    stderr: float
    n: int
    seed: int | None = None

    def to_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "N": self.n, "seed": self.seed}


def _policy_lookup(policy, grid):
    if isinstance(policy, PolicyField):
        flat = policy.indices.reshape(policy.indices.shape[0], -1)
        return lambda node, x, rng: flat[node, grid.nearest_index(x)]
    if isinstance(policy, RelaxedPolicy):
        cdf = np.cumsum(policy.weights, axis=-1).reshape(policy.weights.shape[0], -1, policy.n_controls)

        def draw(node, x, rng):
            c = cdf[node, grid.nearest_index(x)]
            u = rng.random(x.shape[0])[:, None] * c[:, -1:]
            return np.minimum(np.sum(c <= u, axis=1), policy.n_controls - 1)

        return draw
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def _simulate_chunk(problem, tree, policy, grid, count, substeps, rng, record, use_bridge):
    coef = problem.coefficients
    pts = problem.controls.points
    lo, hi = grid.lower, grid.upper
    n = grid.ndim
    nodes = sample_paths(tree, rng, count)
    x = problem.initial_law.sample(rng, count, grid)
    alive = np.ones(count, dtype=bool)
    tau = np.full(count, float(tree.times[-1]))
    cost = np.zeros(count)
    lookup = _policy_lookup(policy, grid)
    positions = {k: np.full((count, n), np.nan) for k in record}

    for k in range(tree.n_levels):
        if k in positions:
            positions[k][alive] = x[alive]
        if not alive.any():
            continue
        h = tree.dt(k) / substeps
        for s in range(substeps):
            t = float(tree.times[k]) + s * h
            ids = np.flatnonzero(alive)
            if ids.size == 0:
                break
            xa = x[ids]
            na = nodes[ids, k]
            ctrl = lookup(na, xa, rng)
            drift = np.empty_like(xa)
            b = np.empty((ids.size, n, n))
            phi = np.empty(ids.size)
            key = na * len(pts) + ctrl
            for kk in np.unique(key):
                m = key == kk
                node, c = divmod(int(kk), len(pts))
                xs = xa[m]
                z = tree.z[node]
                drift[m] = coef.eval_drift(xs, pts[c], z, t)
                b[m] = coef.eval_diffusion(xs, pts[c], z, t)
                phi[m] = coef.eval_cost(xs, pts[c], z, t)
            dw = rng.standard_normal((ids.size, n)) * math.sqrt(h)
            if n == 1 or not np.any(b[:, 0, 1] != 0):
                beta_dw = dw * np.sqrt(np.clip(2.0 * np.diagonal(b, axis1=1, axis2=2), 0.0, None))
                if np.any(np.diagonal(b, axis1=1, axis2=2) < -0.5e-12):
                    diffusion_root(b)  # raises with the offending index
            else:
                beta_dw = np.einsum("pij,pj->pi", diffusion_root(b), dw)
            x1 = xa + drift * h + beta_dw
            var = 2.0 * np.diagonal(b, axis1=1, axis2=2) * h
            u = rng.random(ids.size)
            dead = _kernels.kill_step(xa, x1, lo, hi, var, u, use_bridge)
            x[ids] = x1
            # the exit instant inside a killing step is unknown; take its midpoint
            cost[ids] += phi * np.where(dead, 0.5 * h, h)
            if dead.any():
                tau[ids[dead]] = t + 0.5 * h
                alive[ids[dead]] = False
    if tree.n_levels in positions:
        positions[tree.n_levels][alive] = x[alive]
    return nodes, tau, cost, ~alive, positions


def simulate_paths(problem, tree, policy, N, substeps=4, seed=0, record_levels=(), use_bridge=True, chunk=CHUNK):
    """Euler-Maruyama paths under a feedback policy (nearest-grid-node lookup).

    ``record_levels`` lists tree levels whose states are kept.
    """
    if N < 1 or substeps < 1:
        raise ValueError("N and substeps must be >= 1")
    pde.ensure_valid(problem, tree)
    grid = policy.grid
    record = sorted(set(int(k) for k in record_levels))
    parts = []
    for c, start in enumerate(range(0, N, chunk)):
        count = min(chunk, N - start)
        parts.append(_simulate_chunk(problem, tree, policy, grid, count, substeps, chunk_rng(seed, c), record,
                                     use_bridge))
    nodes = np.concatenate([p[0] for p in parts])
    tau = np.concatenate([p[1] for p in parts])
    cost = np.concatenate([p[2] for p in parts])
    killed = np.concatenate([p[3] for p in parts])
    positions = {k: np.concatenate([p[4][k] for p in parts]) for k in record}
    return PathEnsemble(nodes, tau, cost, killed, positions, tree.times.copy(), int(seed), int(substeps))


def estimate_cost(ensemble):
    """Mean and standard error of per-path costs (compensated sums)."""
    c = np.asarray(ensemble.cost if isinstance(ensemble, PathEnsemble) else ensemble, dtype=float)
    n = c.size
    if n == 0:
        raise ValueError("empty ensemble")
    mean = math.fsum(c) / n
    se = math.sqrt(math.fsum((c - mean) ** 2) / (n - 1) / n) if n > 1 else 0.0
    return CostEstimate(mean, se, n, getattr(ensemble, "seed", None))


@dataclass
class DualityResult:
    z: float
    mc: CostEstimate
    pde_value: float
    allowance: float
    threshold: float = 4.0

    @property
    def gap(self):
        return self.mc.mean - self.pde_value

    @property
    def passed(self):
        return abs(self.gap) <= self.threshold * self.mc.stderr + self.allowance

    def to_dict(self):
        return {"z": self.z, "mc": self.mc.to_dict(), "pde": self.pde_value, "gap": self.gap,
                "allowance": self.allowance, "passed": self.passed}


def refine_policy(policy: PolicyField, fine):
    """Nearest-coarse-node transfer of a policy onto a finer grid."""
    flat = policy.indices.reshape(policy.indices.shape[0], -1)
    idx = flat[:, policy.grid.nearest_index(fine.points)].reshape((-1,) + tuple(fine.shape))
    return PolicyField(idx, policy.tree, fine, policy.n_controls)


def bias_allowance(problem, tree, grid, policy, substeps, theta=1.0, coarse_value=None):
    """Discretization allowance ``||phi||_inf dt_sim + 2 |F_h - F_{h/2}|``."""
    fine = grid.refined(2)
    fine_pol = refine_policy(policy, fine)
    v_fine = pde.pair_initial(problem.initial_law,
                              pde.solve_backward_fixed_control(problem, tree, fine, fine_pol, theta=theta))
    if coarse_value is None:
        coarse_value = pde.pair_initial(problem.initial_law,
                                        pde.solve_backward_fixed_control(problem, tree, grid, policy, theta=theta))
    phi_sup = problem.coefficients.cost_bound
    if not np.isfinite(phi_sup):
        ops = pde.NodeOperators(problem, grid)
        phi_sup = max(float(np.max(np.abs(ops.get(tree.z[n], tree.times[tree.level[n]])[1])))
                      for n in range(tree.n_nodes) if tree.level[n] < tree.n_levels)
    dt_sim = max(tree.dt(k) for k in range(tree.n_levels)) / substeps
    return phi_sup * dt_sim + 2.0 * abs(coarse_value - v_fine)


def duality_gap(problem, tree, grid, policy, N, seed=0, substeps=4, theta=1.0):
    """z-score of the Monte-Carlo cost against the PDE pairing ``<rho, V(., 0)>``."""
    V = pde.solve_backward_fixed_control(problem, tree, grid, policy, theta=theta)
    value = pde.pair_initial(problem.initial_law, V)
    est = estimate_cost(simulate_paths(problem, tree, policy, N, substeps=substeps, seed=seed))
    allowance = bias_allowance(problem, tree, grid, policy, substeps, theta, coarse_value=value)
    gap = est.mean - value
    if est.stderr == 0.0:
        z = 0.0 if gap == 0.0 else math.copysign(math.inf, gap)
    else:
        z = gap / est.stderr
    return DualityResult(z, est, value, allowance)


def mix_controls(policies, alphas, densities):
    """Density-weighted mixture ``sum_i alpha_i q_i 1[u_i = v] / sum_i alpha_i q_i``.

    ``q_i`` is each density field's occupation slice, which is what the
    scheme pairs with the generator; with these weights the forward density
    of the mixture equals the alpha-mixture of the densities exactly.  Where
    the mixed occupation is <= 1e-14 the plain alpha-mixture is used.
    """
    alphas = np.asarray(alphas, dtype=float)
    if len(policies) != alphas.size or len(densities) != alphas.size:
        raise ValueError("need one weight and one density per policy")
    if np.any(alphas < 0) or abs(alphas.sum() - 1.0) > 1e-12:
        raise ValueError("mixing weights must be a probability vector")
    ref = policies[0]
    for pol, dens in zip(policies, densities):
        if pol.tree is not ref.tree or pol.grid != ref.grid or dens.tree is not ref.tree or dens.grid != ref.grid:
            raise ValueError("policies and densities must share one tree and grid")
        if pol.n_controls != ref.n_controls:
            raise ValueError("policies use different control sets")
    weights = [RelaxedPolicy.from_policy(p).weights if isinstance(p, PolicyField) else p.weights for p in policies]
    occ = [np.clip(d.occupation, 0.0, None) for d in densities]
    mixed = sum(a * q for a, q in zip(alphas, occ))
    num = sum(a * q[..., None] * w for a, q, w in zip(alphas, occ, weights))
    plain = sum(a * w for a, w in zip(alphas, weights))
    safe = mixed > 1e-14
    out = np.where(safe[..., None], num / np.where(safe, mixed, 1.0)[..., None], plain)
    out /= out.sum(axis=-1, keepdims=True)
    return RelaxedPolicy(out, ref.tree, ref.grid)


def path_histogram(ensemble, level, grid):
    """Sub-probability density of surviving paths at ``level``, on the dual cells of ``grid``."""
    pos = ensemble.positions[level]
    ok = ~np.isnan(pos[:, 0])
    counts = _kernels.deposit_nearest(pos[ok], grid.lower, grid.spacing, grid.shape)
    return counts / (ensemble.n_paths * grid.weights)


def total_variation(hist, density: DensityField, node_or_slice, grid=None):
    """``0.5 sum |hist - p| w`` against a density slice (array or node index)."""
    grid = grid or density.grid
    p = density.values[node_or_slice] if np.ndim(node_or_slice) == 0 else node_or_slice
    return 0.5 * float(np.sum(np.abs(hist - p) * grid.weights))
