"""Sampled certification of ellipticity and the Cordes-type conditions.

Three sufficient conditions for the L2 a-priori estimate of the linear
backward problems are checked:

* case i   -- ``b`` does not depend on the control;
* case ii  -- ``b = bbar + bhat`` with ``sup sum_ik bhat_ik^2 < C_b^2 / n``;
* case iii -- ``b = bbar + bhat`` with ``bhat`` supported on rows/columns of
  an index set ``N`` and a weighted bound with exponents ``gamma_k in (0, 2)``.

Here ``C_b`` is the smallest eigenvalue of ``bbar`` over the samples.
Suprema and infima are taken over a deterministic sample set, so a PASS is
evidence, not proof; reports carry the sample count and the margin.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .problem import sample_points, sample_times

CASE_I_TOL = 1e-12


@dataclass(frozen=True)
class SampleSet:
    """Points ``x`` (P, n), times, parameter values and control points."""

    x: np.ndarray
    times: np.ndarray
    z: np.ndarray
    v: np.ndarray

    @property
    def count(self):
        return self.x.shape[0] * self.times.size * self.z.shape[0] * self.v.shape[0]

    def iter_xzt(self):
        for z in self.z:
            for t in self.times:
                yield z, t


def build_samples(problem, budget, z_values=None, grid=None, seed=0, n_times=5):
    x = sample_points(problem.domain, budget, seed=seed)
    if grid is not None:
        x = np.vstack([x, grid.interior_points])
    if z_values is None:
        z = np.zeros((1, problem.coefficients.z_dim))
    else:
        z = np.unique(np.atleast_2d(np.asarray(z_values, dtype=float)), axis=0)
    return SampleSet(x, sample_times(problem.horizon, n_times), z, np.asarray(problem.controls.points))


@dataclass(frozen=True)
class CaseIIIParams:
    indices: tuple
    gammas: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        gam = tuple(float(g) for g in self.gammas)
        if not idx:
            raise ConfigError("case iii needs a nonempty index set", field="cordes.case_iii.indices")
        if len(idx) != len(gam):
            raise ConfigError("case iii needs one gamma per index", field="cordes.case_iii.gammas")
        if any(not (0.0 < g < 2.0) for g in gam):
            raise ConfigError("each gamma must lie strictly inside (0, 2)", field="cordes.case_iii.gammas")
        if len(set(idx)) != len(idx):
            raise ConfigError("case iii indices must be distinct", field="cordes.case_iii.indices")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "gammas", gam)


@dataclass
class CordesReport:
    case: str
    ellipticity: float
    c_b: float
    lhs: float
    bound: float
    margin: float
    passed: bool
    witness: dict | None
    samples: int
    message: str = ""

    def to_dict(self):
        return {
            "case": self.case,
            "ellipticity": self.ellipticity,
            "C_b": self.c_b,
            "lhs": self.lhs,
            "bound": self.bound,
            "margin": self.margin,
            "passed": self.passed,
            "witness": self.witness,
            "samples": self.samples,
            "message": self.message,
        }

    def line(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} case={self.case} lhs={self.lhs:.6g} bound={self.bound:.6g} "
                f"margin={self.margin:.6g} C_b={self.c_b:.6g} samples={self.samples}")


def _witness(x, v, z, t):
    wit = {"x": np.asarray(x).tolist(), "z": np.asarray(z).tolist(), "t": float(t)}
    if v is not None:
        wit["v"] = np.asarray(v).tolist()
    return wit


def _check_symmetric(mats, where, label):
    asym = np.max(np.abs(mats - np.swapaxes(mats, -1, -2)), axis=(-1, -2))
    i = int(np.argmax(asym))
    if asym[i] > 1e-12:
        raise DimensionError(f"{label} is not symmetric at {where(i)} (asymmetry {asym[i]:.3g})")


def ellipticity_constant(bbar, samples: SampleSet, return_witness=False):
    """min over samples of the smallest eigenvalue of ``bbar(x, z, t)``."""
    best, wit = np.inf, None
    for z, t in samples.iter_xzt():
        mats = np.asarray(bbar(samples.x, z, t), dtype=float)
        _check_symmetric(mats, lambda i: _witness(samples.x[i], None, z, t), "bbar")
        lam = np.linalg.eigvalsh(mats)[:, 0]
        i = int(np.argmin(lam))
        if lam[i] < best:
            best, wit = float(lam[i]), _witness(samples.x[i], None, z, t)
    return (best, wit) if return_witness else best


def _sup_over_samples(bhat, samples, fn):
    best, wit = -np.inf, None
    for v in samples.v:
        for z, t in samples.iter_xzt():
            mats = np.asarray(bhat(samples.x, v, z, t), dtype=float)
            vals = fn(mats)
            i = int(np.argmax(vals))
            if vals[i] > best:
                best, wit = float(vals[i]), _witness(samples.x[i], v, z, t)
    return best, wit


def check_case_i(diffusion, samples: SampleSet):
    """Largest change of ``b`` across control points; case i holds when <= 1e-12."""
    worst, wit = 0.0, None
    for z, t in samples.iter_xzt():
        ref = np.asarray(diffusion(samples.x, samples.v[0], z, t), dtype=float)
        for v in samples.v[1:]:
            diff = np.max(np.abs(np.asarray(diffusion(samples.x, v, z, t)) - ref), axis=(1, 2))
            i = int(np.argmax(diff))
            if diff[i] > worst:
                worst, wit = float(diff[i]), _witness(samples.x[i], v, z, t)
    lam = np.inf
    for v in samples.v:
        for z, t in samples.iter_xzt():
            lam = min(lam, float(np.linalg.eigvalsh(np.asarray(diffusion(samples.x, v, z, t)))[:, 0].min()))
    passed = worst <= CASE_I_TOL and lam > 0
    return CordesReport("i", lam, lam, worst, CASE_I_TOL, worst - CASE_I_TOL, passed, wit, samples.count,
                        message="b independent of the control" if passed else "b depends on the control")


def check_case_ii(bbar, bhat, n, samples: SampleSet):
    c_b, _ = ellipticity_constant(bbar, samples, return_witness=True)
    s, wit = _sup_over_samples(bhat, samples, lambda m: np.sum(m * m, axis=(1, 2)))
    bound = c_b * c_b / n if c_b > 0 else 0.0
    margin = s - bound
    passed = bool(c_b > 0 and margin < 0)
    return CordesReport("ii", c_b, c_b, s, bound, margin, passed, wit, samples.count)


def case_iii_lhs_terms(mats, params: CaseIIIParams):
    """Per-sample bracket ``sum_{k in N}(sum_{i in N} b_ik^2 + 4 sum_{i notin N} b_ik^2
    + gamma_k/(2-gamma_k) b_kk^2)`` for a batch ``(P, n, n)``; indices 1-based."""
    n = mats.shape[-1]
    inside = np.array([i - 1 for i in params.indices])
    outside = np.array([i for i in range(n) if i not in set(inside)], dtype=int)
    total = np.zeros(mats.shape[0])
    for k0, g in zip(inside, params.gammas):
        col = mats[:, :, k0]
        total += np.sum(col[:, inside] ** 2, axis=1)
        if outside.size:
            total += 4.0 * np.sum(col[:, outside] ** 2, axis=1)
        total += g / (2.0 - g) * mats[:, k0, k0] ** 2
    return total


def check_case_iii(bbar, bhat, params: CaseIIIParams, samples: SampleSet):
    n = samples.x.shape[1]
    if any(i < 1 or i > n for i in params.indices):
        raise ConfigError(f"case iii indices must lie in 1..{n}", field="cordes.case_iii.indices")
    c_b, _ = ellipticity_constant(bbar, samples, return_witness=True)
    outside = [i for i in range(n) if i + 1 not in params.indices]

    struct_bad, struct_wit = 0.0, None
    for v in samples.v:
        for z, t in samples.iter_xzt():
            mats = np.asarray(bhat(samples.x, v, z, t), dtype=float)
            _check_symmetric(mats, lambda i: _witness(samples.x[i], v, z, t), "bhat")
            if outside:
                block = np.max(np.abs(mats[:, outside][:, :, outside]), axis=(1, 2))
                i = int(np.argmax(block))
                if block[i] > struct_bad:
                    struct_bad, struct_wit = float(block[i]), _witness(samples.x[i], v, z, t)
    weight = sum(1.0 / (2.0 * g) for g in params.gammas)
    sup, wit = _sup_over_samples(bhat, samples, lambda m: case_iii_lhs_terms(m, params))
    lhs = weight * sup
    bound = c_b * c_b if c_b > 0 else 0.0
    margin = lhs - bound
    if struct_bad > 1e-12:
        return CordesReport("iii", c_b, c_b, lhs, bound, margin, False, struct_wit, samples.count,
                            message="bhat is nonzero outside the rows/columns of the index set")
    passed = bool(c_b > 0 and margin < 0)
    return CordesReport("iii", c_b, c_b, lhs, bound, margin, passed, wit, samples.count)


def control_average_split(problem):
    """Default decomposition: ``bbar`` = control average of ``b``, ``bhat = b - bbar``."""
    coef = problem.coefficients
    pts = problem.controls.points

    def bbar(x, z, t):
        acc = None
        for v in pts:
            m = coef.eval_diffusion(x, v, z, t)
            acc = m if acc is None else acc + m
        return acc / len(pts)

    def bhat(x, v, z, t):
        return coef.eval_diffusion(x, v, z, t) - bbar(x, z, t)

    return bbar, bhat


def certify(problem, case="auto", samples=None, budget=256, bbar=None, bhat=None, case_iii=None, z_values=None):
    """Run the requested Cordes check; ``auto`` tries i, then ii, then iii."""
    if samples is None:
        samples = build_samples(problem, budget, z_values=z_values)
    if bbar is None or bhat is None:
        bbar, bhat = control_average_split(problem)
    n = problem.dimension
    if case == "i":
        return check_case_i(problem.coefficients.eval_diffusion, samples)
    if case == "ii":
        return check_case_ii(bbar, bhat, n, samples)
    if case == "iii":
        if case_iii is None:
            raise ConfigError("case iii requires index set and gammas", field="cordes.case_iii")
        return check_case_iii(bbar, bhat, case_iii, samples)
    if case != "auto":
        raise ConfigError(f"unknown Cordes case {case!r}", field="case")
    rep = check_case_i(problem.coefficients.eval_diffusion, samples)
    if rep.passed:
        return rep
    rep = check_case_ii(bbar, bhat, n, samples)
    if rep.passed or case_iii is None:
        return rep
    return check_case_iii(bbar, bhat, case_iii, samples)
