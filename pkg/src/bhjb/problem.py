"""Problem instances: domain, controls, coefficients, initial law.

Coefficient evaluators are vectorized over spatial points: for a batch
``x`` of shape ``(P, n)``, a single control point ``v`` of shape ``(m,)``, a
parameter value ``z`` of shape ``(d,)`` and a scalar time ``t``

* ``drift(x, v, z, t)``     returns ``(P, n)``
* ``diffusion(x, v, z, t)`` returns ``(P, n, n)`` (the matrix ``b = beta beta^T / 2``)
* ``cost(x, v, z, t)``      returns ``(P,)``
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import ConfigError, DimensionError, EllipticityError
from .grid import SpatialGrid
from .reports import ValidationReport

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class SpatialDomain:
    lower: tuple
    upper: tuple
    truncated: bool = False

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or len(lo) not in (1, 2):
            raise DimensionError("domain must be a 1D or 2D box")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ConfigError("domain needs lower < upper on every axis", field="domain")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dimension, radius):
        """R^n truncated to the box [-radius, radius]^n with zero boundary data."""
        if not radius > 0:
            raise ConfigError("truncation radius must be positive", field="domain.radius")
        return cls((-radius,) * dimension, (radius,) * dimension, truncated=True)

    @property
    def dimension(self):
        return len(self.lower)

    def contains(self, x):
        """Strict membership in the open box, row-wise for ``x`` of shape (P, n)."""
        x = np.atleast_2d(x)
        return np.all((x > np.asarray(self.lower)) & (x < np.asarray(self.upper)), axis=1)


@dataclass(frozen=True)
class ControlSet:
    points: np.ndarray
    is_convex_hull_sampled: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ConfigError("control set needs at least one point", field="controls")
        if len({tuple(p) for p in pts.tolist()}) != pts.shape[0]:
            raise ConfigError("control points must be distinct", field="controls")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dimension(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class RelaxedMeasure:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("relaxed measure weights must be >= 0 and sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, index, size):
        w = np.zeros(size)
        w[index] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, size):
        return cls(np.full(size, 1.0 / size))


@dataclass(frozen=True)
class CoefficientField:
    drift: Callable
    diffusion: Callable
    cost: Callable
    z_dim: int = 1
    drift_bound: float = np.inf
    diffusion_bound: float = np.inf
    cost_bound: float = np.inf

    def eval_drift(self, x, v, z, t):
        x = np.atleast_2d(x)
        out = np.asarray(self.drift(x, v, z, t), dtype=float)
        return np.broadcast_to(out, x.shape).copy() if out.shape != x.shape else out

    def eval_diffusion(self, x, v, z, t):
        x = np.atleast_2d(x)
        n = x.shape[1]
        out = np.asarray(self.diffusion(x, v, z, t), dtype=float)
        if out.shape != (x.shape[0], n, n):
            out = np.broadcast_to(out, (x.shape[0], n, n)).copy()
        return out

    def eval_cost(self, x, v, z, t):
        x = np.atleast_2d(x)
        out = np.asarray(self.cost(x, v, z, t), dtype=float)
        if out.shape != (x.shape[0],):
            out = np.broadcast_to(out, (x.shape[0],)).copy()
        return out


@dataclass(frozen=True)
class InitialLaw:
    """Law of the initial state.

    ``kind="grid_density"`` takes either explicit nodal ``values`` on a grid
    or a ``density`` callable ``(P, n) -> (P,)`` that is discretized and
    normalized on whatever grid is used.  ``kind="dirac"`` is a point mass,
    spread on a grid with multilinear (cloud-in-cell) weights so that
    quadrature pairing equals multilinear interpolation.
    """

    kind: str
    values: np.ndarray | None = None
    density: Callable | None = None
    point: tuple | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("grid_density", "dirac"):
            raise ConfigError(f"unknown initial law kind {self.kind!r}", field="initial_law.kind")
        if self.kind == "dirac":
            if self.point is None:
                raise ConfigError("dirac initial law needs a point", field="initial_law.point")
            object.__setattr__(self, "point", tuple(float(p) for p in np.atleast_1d(self.point)))
        elif self.values is None and self.density is None:
            raise ConfigError("grid density needs values or a density function", field="initial_law")

    @classmethod
    def uniform(cls):
        return cls("grid_density", density=lambda x: np.ones(np.atleast_2d(x).shape[0]), label="uniform")

    @classmethod
    def dirac_at(cls, point):
        return cls("dirac", point=point, label="dirac")

    def on_grid(self, grid: SpatialGrid):
        """Nodal density values on the full grid, integrating to one."""
        if self.kind == "dirac":
            return grid.multilinear_weights(self.point) / grid.weights
        if self.values is not None:
            vals = np.asarray(self.values, dtype=float)
            if vals.shape != grid.shape:
                raise DimensionError(f"initial density has shape {vals.shape}, grid is {grid.shape}")
            return vals.copy()
        vals = grid.sample(self.density)
        mass = grid.integrate(vals)
        if not mass > 0:
            raise ConfigError("initial density has no positive mass", field="initial_law")
        return vals / mass

    def sample(self, rng, count, grid: SpatialGrid):
        """Draw ``count`` initial points consistent with :meth:`on_grid`.

        Grid densities are sampled as piecewise-constant on dual cells.
        """
        if self.kind == "dirac":
            return np.tile(np.asarray(self.point), (count, 1))
        rho = self.on_grid(grid)
        mass = np.clip(rho * grid.weights, 0.0, None).ravel()
        cdf = np.cumsum(mass)
        cdf /= cdf[-1]
        nodes = np.searchsorted(cdf, rng.random(count), side="right")
        nodes = np.minimum(nodes, cdf.size - 1)
        centers = grid.points[nodes]
        lo = np.maximum(centers - grid.spacing / 2, grid.lower)
        hi = np.minimum(centers + grid.spacing / 2, grid.upper)
        return lo + (hi - lo) * rng.random((count, grid.ndim))


@dataclass(frozen=True)
class ControlProblem:
    domain: SpatialDomain
    horizon: float
    coefficients: CoefficientField
    controls: ControlSet
    initial_law: InitialLaw
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigError("horizon T must be positive", field="horizon")

    @property
    def dimension(self):
        return self.domain.dimension


def relax_coefficient(component, x, z, t, u: RelaxedMeasure, controls: ControlSet):
    """Average a coefficient over a relaxed control: sum_i w_i * component(x, v_i, z, t)."""
    weights = u.weights if isinstance(u, RelaxedMeasure) else np.asarray(u, dtype=float)
    if weights.shape != (len(controls),):
        raise DimensionError(f"measure has {weights.size} weights, control set has {len(controls)} points")
    out = None
    for w, v in zip(weights, controls.points):
        term = w * np.asarray(component(x, v, z, t), dtype=float)
        out = term if out is None else out + term
    return out


def diffusion_root(b):
    """Symmetric PSD square root of ``2 b`` for a batch ``(P, n, n)``.

    Eigenvalues in ``[-1e-12, 0)`` are clamped to zero; anything more
    negative raises :class:`EllipticityError` naming the first bad index.
    """
    b = np.asarray(b, dtype=float)
    if b.shape[-1] == 1:
        two_b = 2.0 * b[..., 0, 0]
        bad = two_b < -1e-12
        if np.any(bad):
            raise EllipticityError("2b has a negative eigenvalue", location=int(np.argmax(bad)))
        return np.sqrt(np.clip(two_b, 0.0, None))[..., None, None]
    lam, vec = np.linalg.eigh(2.0 * b)
    bad = np.any(lam < -1e-12, axis=-1)
    if np.any(bad):
        raise EllipticityError("2b has a negative eigenvalue", location=int(np.argmax(bad)))
    root = np.sqrt(np.clip(lam, 0.0, None))
    return np.einsum("pij,pj,pkj->pik", vec, root, vec)


def sample_points(domain: SpatialDomain, budget, seed=0):
    """Deterministic low-discrepancy points strictly inside the domain."""
    if budget < 1:
        raise ConfigError("sample budget must be >= 1", field="samples")
    sampler = qmc.Halton(d=domain.dimension, scramble=True, seed=seed)
    unit = sampler.random(int(budget))
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    return lo + (hi - lo) * unit


def sample_times(horizon, count=5):
    return np.linspace(0.0, horizon, count + 1)[:-1]


def validate_problem(problem: ControlProblem, sample_budget=512, z_values=None, grid=None, seed=0):
    """Spot-check a problem instance on deterministic samples.

    Checks finiteness, symmetry of ``b``, declared sup-norm bounds, uniform
    ellipticity and the normalization of the initial law.  Each check
    records its worst value and the ``(x, v, z, t)`` where it occurred.
    ``z_values`` defaults to the zero vector.
    """
    if sample_budget < 1:
        raise ConfigError("sample budget must be >= 1", field="samples")
    coef = problem.coefficients
    report = ValidationReport(subject=f"problem {problem.name or '<unnamed>'}")
    if problem.domain.truncated:
        report.notes.append(
            f"unbounded domain truncated to box {problem.domain.lower}..{problem.domain.upper} with zero boundary data"
        )
    xs = sample_points(problem.domain, sample_budget, seed=seed)
    if grid is not None:
        xs = np.vstack([xs, grid.interior_points])
    ts = sample_times(problem.horizon)
    zs = _distinct_z(z_values, coef.z_dim)

    worst = {
        "finite": (0.0, None),
        "symmetry": (0.0, None),
        "drift_bound": (0.0, None),
        "diffusion_bound": (0.0, None),
        "cost_bound": (0.0, None),
        "ellipticity": (np.inf, None),
    }
    nonfinite = None
    for v in problem.controls.points:
        for z in zs:
            for t in ts:
                f = coef.eval_drift(xs, v, z, t)
                b = coef.eval_diffusion(xs, v, z, t)
                phi = coef.eval_cost(xs, v, z, t)
                finite = np.isfinite(f).all(axis=1) & np.isfinite(b).all(axis=(1, 2)) & np.isfinite(phi)
                if not finite.all() and nonfinite is None:
                    i = int(np.argmin(finite))
                    nonfinite = _witness(xs[i], v, z, t)
                if not finite.any():
                    continue
                fx, bx, px, xx = f[finite], b[finite], phi[finite], xs[finite]
                asym = np.max(np.abs(bx - np.swapaxes(bx, 1, 2)), axis=(1, 2))
                _track_max(worst, "symmetry", asym, xx, v, z, t)
                _track_max(worst, "drift_bound", np.linalg.norm(fx, axis=1), xx, v, z, t)
                sym = 0.5 * (bx + np.swapaxes(bx, 1, 2))
                lam = np.linalg.eigvalsh(sym)
                _track_max(worst, "diffusion_bound", np.max(np.abs(lam), axis=1), xx, v, z, t)
                _track_max(worst, "cost_bound", np.abs(px), xx, v, z, t)
                i = int(np.argmin(lam[:, 0]))
                if lam[i, 0] < worst["ellipticity"][0]:
                    worst["ellipticity"] = (float(lam[i, 0]), _witness(xx[i], v, z, t))

    report.add("finite", nonfinite is None, witness=nonfinite,
               message="" if nonfinite is None else "coefficient evaluation returned a non-finite value")
    val, wit = worst["symmetry"]
    report.add("symmetry", val <= SYMMETRY_TOL, val, wit)
    for name, bound in (("drift_bound", coef.drift_bound), ("diffusion_bound", coef.diffusion_bound),
                        ("cost_bound", coef.cost_bound)):
        val, wit = worst[name]
        report.add(name, val <= bound, val, wit, message=f"declared {bound:g}")
    val, wit = worst["ellipticity"]
    report.add("ellipticity", val > 0, val, wit, message="min eigenvalue of b over samples")
    _check_initial_law(problem, report, grid)
    return report


def _check_initial_law(problem, report, grid):
    law = problem.initial_law
    if law.kind == "dirac":
        pt = np.asarray(law.point)
        inside = pt.size == problem.dimension and bool(problem.domain.contains(pt[None, :])[0])
        report.add("initial_law", inside, witness={"point": pt},
                   message="dirac point must lie strictly inside D")
        if problem.dimension >= 2:
            report.notes.append("dirac initial law in n>=2 is spread with multilinear cell weights (approximation)")
        return
    if law.values is not None:
        vals = np.asarray(law.values, dtype=float)
        g = SpatialGrid.from_domain(problem.domain, vals.shape)
        mass = g.integrate(vals)
        ok = bool(np.all(vals >= 0)) and abs(mass - 1.0) <= 1e-8
        report.add("initial_law", ok, mass, message="grid density must be >= 0 and integrate to 1")
        return
    g = grid if grid is not None else SpatialGrid.from_domain(problem.domain, (33,) * problem.dimension)
    raw = g.sample(law.density)
    ok = bool(np.all(raw >= 0)) and g.integrate(raw) > 0
    report.add("initial_law", ok, g.integrate(law.on_grid(g)),
               message="density must be >= 0 with positive mass (normalized on the grid)")


def _distinct_z(z_values, z_dim):
    if z_values is None:
        return [np.zeros(z_dim)]
    zs = np.unique(np.atleast_2d(np.asarray(z_values, dtype=float)), axis=0)
    if zs.shape[0] > 32:
        zs = zs[np.linspace(0, zs.shape[0] - 1, 32).round().astype(int)]
    return list(zs)


def _witness(x, v, z, t):
    return {"x": np.asarray(x).tolist(), "v": np.asarray(v).tolist(), "z": np.asarray(z).tolist(), "t": float(t)}


def _track_max(worst, name, values, xs, v, z, t):
    i = int(np.argmax(values))
    if values[i] > worst[name][0] or worst[name][1] is None:
        worst[name] = (float(values[i]), _witness(xs[i], v, z, t))
