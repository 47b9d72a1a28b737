"""Finite-difference generator, backward theta-scheme sweeps and the
forward (adjoint) density sweep on grid x scenario tree.

Discretization of ``A V = sum b_ij V_ij + sum f_i V_i`` at interior nodes:

* ``b_jj V_jj``: central second difference;
* ``f_j V_j``: one-sided difference in the direction of ``sign(f_j)``
  (forward when ``f_j > 0``), which keeps off-diagonal weights >= 0;
* ``(b_12 + b_21) V_12`` (2D only): four-point central stencil.  This term
  breaks the M-matrix property, so grids with cross terms are not monotone.

A relaxed control mixes the per-control stencil rows with its weights,
which keeps the discrete operator affine in the measure.

One backward step over ``[t_k, t_{k+1})`` at node ``n`` with terminal data
``W = E[V_{k+1} | n]``::

    (I - theta dt A) V_k = (I + (1 - theta) dt A) W + dt * source

The forward sweep applies the transposes of exactly these matrices.
"""

import functools
import itertools
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from . import _kernels
from .errors import DimensionError, LinearSolveError, StabilityError
from .fields import DensityField, PolicyField, RelaxedPolicy, ValueField
from .grid import SpatialGrid
from .problem import InitialLaw, validate_problem
from .tree import conditional_expectation, validate_tree

RESIDUAL_TOL = 1e-10


# --------------------------------------------------------------------------
# stencils


def _offsets(ndim):
    return list(itertools.product((-1, 0, 1), repeat=ndim))


def _oidx(off):
    out = 0
    for o in off:
        out = out * 3 + (o + 1)
    return out


@functools.lru_cache(maxsize=32)
def _neighbors(grid: SpatialGrid):
    """Full-grid flat index (P, S) and interior unknown index (P, S; -1 on
    the boundary) of every stencil neighbor of every interior node."""
    offs = _offsets(grid.ndim)
    inner = np.meshgrid(*[np.arange(1, s - 1) for s in grid.shape], indexing="ij")
    inner = np.stack([m.ravel() for m in inner], axis=-1)
    full = np.empty((inner.shape[0], len(offs)), dtype=np.int64)
    unk = np.empty_like(full)
    ishape = np.asarray(grid.interior_shape)
    for s, off in enumerate(offs):
        nb = inner + np.asarray(off)
        full[:, s] = np.ravel_multi_index(tuple(nb.T), grid.shape)
        ii = nb - 1
        ok = np.all((ii >= 0) & (ii < ishape), axis=1)
        flat = np.full(nb.shape[0], -1, dtype=np.int64)
        flat[ok] = np.ravel_multi_index(tuple(ii[ok].T), grid.interior_shape)
        unk[:, s] = flat
    full.setflags(write=False)
    unk.setflags(write=False)
    return full, unk


def stencil_coefficients(f, b, grid: SpatialGrid):
    """Stencil weights ``(..., P, 3**n)`` from drift ``(..., P, n)`` and diffusion ``(..., P, n, n)``."""
    n = grid.ndim
    h = grid.spacing
    coef = np.zeros(f.shape[:-1] + (3 ** n,))
    center = _oidx((0,) * n)
    for j in range(n):
        e = [0] * n
        e[j] = -1
        minus = _oidx(tuple(e))
        e[j] = 1
        plus = _oidx(tuple(e))
        bjj = b[..., j, j] / h[j] ** 2
        fp = np.maximum(f[..., j], 0.0) / h[j]
        fm = np.maximum(-f[..., j], 0.0) / h[j]
        coef[..., minus] += bjj + fm
        coef[..., plus] += bjj + fp
        coef[..., center] -= 2.0 * bjj + fp + fm
    if n == 2:
        c = (b[..., 0, 1] + b[..., 1, 0]) / (4.0 * h[0] * h[1])
        coef[..., _oidx((1, 1))] += c
        coef[..., _oidx((-1, -1))] += c
        coef[..., _oidx((1, -1))] -= c
        coef[..., _oidx((-1, 1))] -= c
    return coef


def is_monotone(coef, grid):
    """True when all off-center stencil weights are >= 0 (M-matrix rows)."""
    center = _oidx((0,) * grid.ndim)
    off = np.delete(coef, center, axis=-1)
    return bool(np.all(off >= -1e-14 * np.max(np.abs(coef), initial=1.0)))


def apply_stencil(coef, values, grid):
    """``A V`` at interior nodes for stencil weights ``(P, S)`` or ``(M, P, S)``.

    Uses the boundary entries of ``values`` as given.
    """
    full, _ = _neighbors(grid)
    vn = np.asarray(values, dtype=float).ravel()[full]
    if coef.ndim == 2:
        return np.einsum("ps,ps->p", coef, vn)
    return np.einsum("mps,ps->mp", coef, vn)


def stencil_matrix(coef, grid):
    """Sparse ``(P, P)`` matrix of the operator on interior unknowns (zero boundary data)."""
    _, unk = _neighbors(grid)
    rows = np.repeat(np.arange(unk.shape[0]), unk.shape[1]).reshape(unk.shape)
    ok = unk >= 0
    return sp.csr_matrix((coef[ok], (rows[ok], unk[ok])), shape=(unk.shape[0], unk.shape[0]))


def stencil_transpose_apply(coef, q, grid):
    """``A^T q`` on interior unknowns."""
    _, unk = _neighbors(grid)
    out = np.zeros(unk.shape[0])
    ok = unk >= 0
    np.add.at(out, unk[ok], (coef * q[:, None])[ok])
    return out


# --------------------------------------------------------------------------
# per-node coefficient evaluation


class NodeOperators:
    """Stencils ``(M, P, S)`` and running costs ``(M, P)`` for every control at (z, t).

    A small LRU keeps recently used ``(z, t)`` pairs so recombining nodes at
    one level share the evaluation.
    """

    def __init__(self, problem, grid, maxsize=8):
        self.problem = problem
        self.grid = grid
        self.maxsize = maxsize
        self._cache = OrderedDict()
        self._lock = threading.Lock()

    def get(self, z, t):
        key = (np.asarray(z, dtype=float).tobytes(), float(t))
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
            return self._evaluate(key, z, t)

    def _evaluate(self, key, z, t):
        coef = self.problem.coefficients
        x = self.grid.interior_points
        pts = self.problem.controls.points
        f = np.stack([coef.eval_drift(x, v, z, t) for v in pts])
        b = np.stack([coef.eval_diffusion(x, v, z, t) for v in pts])
        phi = np.stack([coef.eval_cost(x, v, z, t) for v in pts])
        out = (stencil_coefficients(f, b, self.grid), phi)
        self._cache[key] = out
        if len(self._cache) > self.maxsize:
            self._cache.popitem(last=False)
        return out


def select_control(stencils, costs, policy, node):
    """Stencil ``(P, S)`` and cost ``(P,)`` at ``node`` under a hard or relaxed policy."""
    if isinstance(policy, PolicyField):
        idx = policy.interior_indices(node)
        ar = np.arange(idx.size)
        return stencils[idx, ar], costs[idx, ar]
    if isinstance(policy, RelaxedPolicy):
        w = policy.node_weights(node)
        return np.einsum("pm,mps->ps", w, stencils), np.einsum("pm,mp->p", w, costs)
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def map_nodes(fn, nodes, threads=1):
    """Apply ``fn`` to every node of one level; nodes write disjoint slices,
    so the result does not depend on scheduling."""
    if threads <= 1 or len(nodes) < 2:
        for node in nodes:
            fn(int(node))
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda n: fn(int(n)), nodes))


# --------------------------------------------------------------------------
# one theta step


def stability_bound(coef, theta):
    """Largest stable ``dt`` for ``theta < 1/2`` (infinite otherwise)."""
    if theta >= 0.5:
        return np.inf
    diag = -coef[:, coef.shape[1] // 2]
    peak = float(np.max(diag, initial=0.0))
    if peak <= 0:
        return np.inf
    return 1.0 / ((1.0 - 2.0 * theta) * peak)


def _check_stability(coef, dt, theta):
    bound = stability_bound(coef, theta)
    if dt > bound * (1 + 1e-12):
        raise StabilityError(
            f"time step {dt:.6g} exceeds the stability bound {bound:.6g} for theta={theta}", bound=bound
        )


def _implicit_solve(coef, rhs, a, grid, transpose=False):
    """Solve ``(I - a A) x = rhs`` (or its transpose)."""
    if grid.ndim == 1:
        lower = -a * coef[:, 0]
        diag = 1.0 - a * coef[:, 1]
        upper = -a * coef[:, 2]
        if transpose:
            lower, upper = np.concatenate(([0.0], upper[:-1])), np.concatenate((lower[1:], [0.0]))
        try:
            x = _kernels.solve_tridiagonal(lower, diag, upper, rhs)
        except (np.linalg.LinAlgError, ZeroDivisionError) as exc:
            raise LinearSolveError(f"tridiagonal solve failed: {exc}", residual=np.inf) from None
        res = diag * x - rhs
        res[1:] += lower[1:] * x[:-1]
        res[:-1] += upper[:-1] * x[1:]
        scale = max(1.0, float(np.max(np.abs(rhs))), float(np.max(np.abs(diag * x))))
    else:
        mat = sp.identity(grid.n_interior, format="csr") - a * stencil_matrix(coef, grid)
        if transpose:
            mat = mat.T
        mat = mat.tocsc()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MatrixRankWarning)
            x = spsolve(mat, rhs)
        res = mat @ x - rhs
        scale = max(1.0, float(np.max(np.abs(rhs))), float(np.max(np.abs(mat.diagonal() * x))))
    resid = float(np.max(np.abs(res))) / scale
    if not np.isfinite(resid) or resid > RESIDUAL_TOL:
        raise LinearSolveError(f"linear solve residual {resid:.3g} exceeds {RESIDUAL_TOL:g}", residual=resid)
    return x


def theta_step(coef, w_full, source, dt, theta, grid):
    """Interior values of one backward step from terminal slice ``w_full``."""
    _check_stability(coef, dt, theta)
    rhs = grid.interior(w_full) + dt * source
    if theta < 1.0:
        rhs = rhs + (1.0 - theta) * dt * apply_stencil(coef, w_full, grid)
    if theta == 0.0:
        return rhs
    return _implicit_solve(coef, rhs, theta * dt, grid)


def theta_step_adjoint(coef, p_interior, dt, theta, grid):
    """Forward step: returns ``(q, p_next)`` with ``q = (I - theta dt A)^{-T} p`` and
    ``p_next = (I + (1 - theta) dt A)^T q``."""
    _check_stability(coef, dt, theta)
    q = p_interior if theta == 0.0 else _implicit_solve(coef, p_interior, theta * dt, grid, transpose=True)
    if theta < 1.0:
        return q, q + (1.0 - theta) * dt * stencil_transpose_apply(coef, q, grid)
    return q, q


# --------------------------------------------------------------------------
# validation gate shared by all solver entry points

_VALIDATED = OrderedDict()


def ensure_valid(problem, tree, grid=None, budget=256):
    """Validate problem and tree (memoized per object pair) and raise if rejected."""
    key = (id(problem), id(tree))
    hit = _VALIDATED.get(key)
    if hit is not None and hit[0] is problem and hit[1] is tree:
        return
    validate_tree(tree).raise_if_failed()
    if tree.z_dim != problem.coefficients.z_dim:
        raise DimensionError(f"tree carries z of dimension {tree.z_dim}, problem expects {problem.coefficients.z_dim}")
    if abs(tree.times[-1] - problem.horizon) > 1e-9 * max(1.0, problem.horizon):
        raise DimensionError(f"tree ends at t={tree.times[-1]:g} but the horizon is T={problem.horizon:g}")
    validate_problem(problem, budget, z_values=tree.z).raise_if_failed()
    _VALIDATED[key] = (problem, tree)
    if len(_VALIDATED) > 64:
        _VALIDATED.popitem(last=False)


def _check_grid(problem, grid):
    if grid.ndim != problem.dimension or not (
        np.allclose(grid.lower, problem.domain.lower) and np.allclose(grid.upper, problem.domain.upper)
    ):
        raise DimensionError(f"{grid!r} does not cover the problem domain")


# --------------------------------------------------------------------------
# public operations


def apply_generator(values, v, z, t, grid, problem):
    """``A(x, v, z, t) V`` on the full grid (zero at boundary nodes).

    ``v`` is a control index or a control point.
    """
    coef = problem.coefficients
    if np.ndim(v) == 0 and float(v).is_integer() and len(problem.controls) > int(v) >= 0 and not isinstance(v, float):
        v = problem.controls.points[int(v)]
    v = np.atleast_1d(np.asarray(v, dtype=float))
    x = grid.interior_points
    st = stencil_coefficients(coef.eval_drift(x, v, z, t), coef.eval_diffusion(x, v, z, t), grid)
    return grid.embed(apply_stencil(st, values, grid))


def _source_slice(source, grid, tree, node):
    if source is None:
        return None
    if callable(source):
        k = tree.level[node]
        return np.asarray(source(grid.interior_points, float(tree.times[k]), tree.z[node]), dtype=float)
    return grid.interior(np.asarray(source)[node])


def solve_backward_fixed_control(problem, tree, grid, policy, theta=1.0, source=None, terminal=None, validate=True,
                                 threads=1):
    """Backward theta-scheme sweep for a fixed (hard or relaxed) policy.

    ``source`` replaces the running cost; it is a node-indexed full-grid
    array or a callable ``(x, t, z) -> (P,)``.  ``terminal`` gives leaf data
    (full grid, boundary ignored); the default is zero.
    """
    if validate:
        ensure_valid(problem, tree)
    _check_grid(problem, grid)
    ops = NodeOperators(problem, grid)
    V = ValueField.zeros(tree, grid, scheme=f"theta={theta:g}", problem_name=problem.name)
    if terminal is not None:
        term = grid.embed(grid.interior(np.asarray(terminal, dtype=float)))
        for leaf in tree.leaves:
            V.values[leaf] = term
    for k in range(tree.n_levels - 1, -1, -1):
        dt, t = tree.dt(k), float(tree.times[k])

        def step(node, dt=dt, t=t):
            w = conditional_expectation(tree, V.values, node)
            st, cost = ops.get(tree.z[node], t)
            coef, phi = select_control(st, cost, policy, node)
            src = _source_slice(source, grid, tree, node)
            V.values[node] = grid.embed(theta_step(coef, w, phi if src is None else src, dt, theta, grid))

        map_nodes(step, tree.by_level[k], threads)
    return V


def initial_density(rho, grid):
    if isinstance(rho, InitialLaw):
        return rho.on_grid(grid)
    rho = np.asarray(rho, dtype=float)
    if rho.shape != tuple(grid.shape):
        raise DimensionError(f"initial density has shape {rho.shape}, grid is {grid.shape}")
    return rho


def solve_forward_kolmogorov(problem, tree, grid, policy, rho=None, theta=1.0, validate=True):
    """Forward sweep of the killed density with the discrete adjoint operator.

    The root slice is the initial density itself (boundary nodes included,
    so its mass is one); boundary values vanish from the first step on.
    Each child starts from its parent's end-of-interval density.
    """
    if validate:
        ensure_valid(problem, tree)
    _check_grid(problem, grid)
    rho = problem.initial_law if rho is None else rho
    ops = NodeOperators(problem, grid)
    D = DensityField.zeros(tree, grid)
    D.values[tree.root] = initial_density(rho, grid)
    for k in range(tree.n_levels):
        dt, t = tree.dt(k), float(tree.times[k])
        for node in tree.by_level[k]:
            st, cost = ops.get(tree.z[node], t)
            coef, _ = select_control(st, cost, policy, node)
            q, p_next = theta_step_adjoint(coef, grid.interior(D.values[node]), dt, theta, grid)
            D.occupation[node] = grid.embed(q)
            nxt = grid.embed(p_next)
            for child in tree.children[node]:
                D.values[child] = nxt
    return D


def pair_initial(rho, V: ValueField):
    """``<rho, V(., 0, root)>``: quadrature for densities, multilinear
    interpolation for a point mass."""
    grid = V.grid
    root = V.values[V.tree.root]
    if isinstance(rho, InitialLaw) and rho.kind == "dirac":
        return grid.interpolate(root, rho.point)
    return grid.pair(initial_density(rho, grid), root)


def expected_cost(problem, tree, grid, policy, density: DensityField, source=None):
    """``sum_k dt_k sum_n P(n) <cost_n, occupation_n>`` -- the cost functional
    computed from the forward densities."""
    ops = NodeOperators(problem, grid)
    pp = tree.path_probability()
    total = 0.0
    for k in range(tree.n_levels):
        dt, t = tree.dt(k), float(tree.times[k])
        for node in tree.by_level[k]:
            st, cost = ops.get(tree.z[node], t)
            _, phi = select_control(st, cost, policy, node)
            src = _source_slice(source, grid, tree, node)
            src = phi if src is None else src
            occ = grid.interior(density.occupation[node])
            total += dt * pp[node] * grid.cell_volume * float(np.dot(src, occ))
    return total


def terminal_pairing(density: DensityField, psi):
    """``sum_leaves P(leaf) <p_K, psi>``."""
    tree, grid = density.tree, density.grid
    pp = tree.path_probability()
    psi = np.asarray(psi, dtype=float)
    return sum(pp[leaf] * grid.pair(density.values[leaf], psi) for leaf in tree.leaves)


# --------------------------------------------------------------------------
# regularity probe


@dataclass
class ProbeResult:
    ratios: np.ndarray

    @property
    def mean(self):
        return float(np.mean(self.ratios)) if self.ratios.size else 0.0

    @property
    def max(self):
        return float(np.max(self.ratios)) if self.ratios.size else 0.0


def _h2_sq(values, grid):
    """Discrete ``||V||_{H^2}^2`` with central differences at interior nodes."""
    v = np.asarray(values)
    h = grid.spacing
    inner = tuple(slice(1, -1) for _ in range(grid.ndim))
    total = np.sum(v[inner] ** 2)
    for j in range(grid.ndim):
        plus = [slice(1, -1)] * grid.ndim
        minus = [slice(1, -1)] * grid.ndim
        plus[j] = slice(2, None)
        minus[j] = slice(None, -2)
        d1 = (v[tuple(plus)] - v[tuple(minus)]) / (2 * h[j])
        d2 = (v[tuple(plus)] - 2 * v[inner] + v[tuple(minus)]) / h[j] ** 2
        total += np.sum(d1 ** 2) + np.sum(d2 ** 2)
    if grid.ndim == 2:
        d12 = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (4 * h[0] * h[1])
        total += 2 * np.sum(d12 ** 2)
    return float(total) * grid.cell_volume


def condition1_bound_probe(problem, tree, grid, policy, psi_samples, theta=1.0):
    """Empirical ``(int ||V_t||^2 + ||V||_{H^2}^2 dt) / ||psi||^2_{L2(Q)}`` per source.

    Each ``psi`` is a callable ``(x, t, z) -> (P,)`` or a node-indexed array.
    Path integrals are averaged over the tree with path probabilities.  A
    zero source gives ratio 0.
    """
    pp = tree.path_probability()
    ratios = []
    for psi in psi_samples:
        V = solve_backward_fixed_control(problem, tree, grid, policy, theta=theta, source=psi)
        num = den = 0.0
        for k in range(tree.n_levels):
            dt = tree.dt(k)
            for node in tree.by_level[k]:
                w = conditional_expectation(tree, V.values, node)
                vt = grid.interior((V.values[node] - w) / dt)
                src = _source_slice(psi, grid, tree, node)
                num += dt * pp[node] * (grid.cell_volume * float(vt @ vt) + _h2_sq(V.values[node], grid))
                den += dt * pp[node] * grid.cell_volume * float(src @ src)
        ratios.append(0.0 if den == 0.0 else num / den)
    return ProbeResult(np.asarray(ratios))


@dataclass
class RefinementStudy:
    shapes: list
    means: list
    growth: list
    threshold: float

    @property
    def flagged(self):
        return any(g > self.threshold for g in self.growth)


def condition1_refinement_study(problem, tree, shapes, policy_for_grid, psi_samples, theta=1.0, threshold=4.0):
    """Run the probe on successively refined grids; flag growth above ``threshold`` per refinement."""
    means = []
    for shape in shapes:
        g = SpatialGrid.from_domain(problem.domain, shape)
        res = condition1_bound_probe(problem, tree, g, policy_for_grid(g), psi_samples, theta=theta)
        means.append(res.mean)
    growth = [means[i + 1] / means[i] if means[i] > 0 else 0.0 for i in range(len(means) - 1)]
    return RefinementStudy(list(shapes), means, growth, threshold)
