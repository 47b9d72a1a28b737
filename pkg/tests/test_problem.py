import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bhjb.errors import ConfigError, DimensionError, EllipticityError
from bhjb.grid import SpatialGrid
from bhjb.problem import (
    ControlSet,
    InitialLaw,
    RelaxedMeasure,
    SpatialDomain,
    diffusion_root,
    relax_coefficient,
    sample_points,
    validate_problem,
)

from helpers import n_of, problem_1d, scalar


def test_constant_problem_passes_every_check():
    rep = validate_problem(problem_1d(), 64)
    assert rep.passed
    assert {c.name for c in rep.checks} >= {"symmetry", "ellipticity", "initial_law", "finite"}


def test_negative_diffusion_control_fails_ellipticity_with_witness():
    prob = problem_1d(diffusion=lambda x, v, z, t: np.full((n_of(x), 1, 1), scalar(v)), controls=((-1.0,), (1.0,)))
    rep = validate_problem(prob, 32)
    chk = rep.check("ellipticity")
    assert not rep.passed and not chk.passed
    assert chk.witness["v"] == [-1.0]
    assert chk.value == pytest.approx(-1.0)


def test_oscillating_diffusion_min_matches_brute_force():
    prob = problem_1d(diffusion=lambda x, v, z, t: (0.6 + 0.5 * np.sin(10 * x[:, 0]))[:, None, None])
    rep = validate_problem(prob, 1000)
    xs = sample_points(prob.domain, 1000)
    brute = float(np.min(0.6 + 0.5 * np.sin(10 * xs[:, 0])))
    assert rep.passed
    assert rep.check("ellipticity").value == pytest.approx(brute, abs=1e-15)
    assert rep.check("ellipticity").value == pytest.approx(0.1, abs=1e-3)


def test_nonfinite_coefficient_reported_with_point():
    def cost(x, v, z, t):
        out = np.ones(n_of(x))
        out[x[:, 0] > 0.9] = np.nan
        return out

    rep = validate_problem(problem_1d(cost=cost), 64)
    chk = rep.check("finite")
    assert not chk.passed
    assert chk.witness["x"][0] > 0.9 and "t" in chk.witness


def test_asymmetric_diffusion_fails_symmetry():
    from bhjb.problem import CoefficientField, ControlProblem

    def b(x, v, z, t):
        m = np.tile(np.eye(2), (n_of(x), 1, 1))
        m[:, 0, 1] = 1e-6
        return m

    coef = CoefficientField(lambda x, v, z, t: np.zeros((n_of(x), 2)), b, lambda x, v, z, t: np.ones(n_of(x)))
    prob = ControlProblem(SpatialDomain((0, 0), (1, 1)), 1.0, coef, ControlSet([[0.0]]), InitialLaw.uniform())
    assert not validate_problem(prob, 16).check("symmetry").passed


def test_declared_bounds_are_spot_checked():
    from bhjb.problem import CoefficientField, ControlProblem

    coef = CoefficientField(lambda x, v, z, t: np.full((n_of(x), 1), 2.0), lambda x, v, z, t: np.full((n_of(x), 1, 1), .5),
                            lambda x, v, z, t: np.ones(n_of(x)), drift_bound=1.0)
    prob = ControlProblem(SpatialDomain((0,), (1,)), 1.0, coef, ControlSet([[0.0]]), InitialLaw.uniform())
    rep = validate_problem(prob, 16)
    assert not rep.check("drift_bound").passed and rep.check("cost_bound").passed


def test_validation_is_deterministic():
    prob = problem_1d(diffusion=lambda x, v, z, t: (0.6 + 0.5 * np.sin(10 * x[:, 0]))[:, None, None])
    assert validate_problem(prob, 100, seed=3).to_dict() == validate_problem(prob, 100, seed=3).to_dict()


def test_dirac_must_be_strictly_inside():
    assert not validate_problem(problem_1d(law=InitialLaw.dirac_at(1.0)), 8).check("initial_law").passed
    assert validate_problem(problem_1d(law=InitialLaw.dirac_at(0.3)), 8).check("initial_law").passed


def test_grid_density_values_must_integrate_to_one():
    g = SpatialGrid((0.0,), (1.0,), (11,))
    ok = InitialLaw("grid_density", values=np.ones(11))
    bad = InitialLaw("grid_density", values=np.full(11, 2.0))
    assert validate_problem(problem_1d(law=ok), 8, grid=g).check("initial_law").passed
    assert not validate_problem(problem_1d(law=bad), 8, grid=g).check("initial_law").passed


def test_truncated_domain_is_noted():
    prob = problem_1d(domain=SpatialDomain.unbounded(1, 3.0))
    rep = validate_problem(prob, 8)
    assert any("truncated" in n for n in rep.notes)
    with pytest.raises(ConfigError):
        SpatialDomain.unbounded(1, 0.0)


def test_domain_and_control_invariants():
    with pytest.raises(ConfigError):
        SpatialDomain((1.0,), (0.0,))
    with pytest.raises(DimensionError):
        SpatialDomain((0, 0, 0), (1, 1, 1))
    with pytest.raises(ConfigError):
        ControlSet([[1.0], [1.0]])
    with pytest.raises(ConfigError):
        RelaxedMeasure([0.5, 0.6])
    assert len(ControlSet([0.0, 1.0, 2.0])) == 3


# -- relaxation ------------------------------------------------------------

CTRL = ControlSet([[-1.0], [1.0]])
X = np.linspace(0.1, 0.9, 5)[:, None]


def f_v(x, v, z, t):
    return np.full((n_of(x), 1), scalar(v)) * (1 + x)


def test_relax_dirac_is_identity():
    out = relax_coefficient(f_v, X, 0.0, 0.0, RelaxedMeasure.dirac(1, 2), CTRL)
    np.testing.assert_array_equal(out, f_v(X, [1.0], 0.0, 0.0))


def test_relax_uniform_symmetric_drift_is_zero():
    out = relax_coefficient(lambda x, v, z, t: np.full((n_of(x), 1), scalar(v)), X, 0, 0, RelaxedMeasure.uniform(2), CTRL)
    np.testing.assert_array_equal(out, 0.0)


def test_relax_forced_weighted_sum():
    phi = lambda x, v, z, t: np.full(n_of(x), 0.0 if scalar(v) < 0 else 4.0)  # noqa: E731
    out = relax_coefficient(phi, X, 0, 0, RelaxedMeasure([0.25, 0.75]), CTRL)
    np.testing.assert_allclose(out, 3.0, rtol=0, atol=0)


def test_relax_length_mismatch():
    with pytest.raises(DimensionError):
        relax_coefficient(f_v, X, 0, 0, np.array([0.2, 0.3, 0.5]), CTRL)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_relax_is_affine_in_the_measure(a, p, q, alpha):
    ctrl = ControlSet([[-1.0], [0.5], [2.0]])
    u1 = np.array([p, 1 - p, 0.0])
    u2 = np.array([0.0, q, 1 - q])
    mix = alpha * u1 + (1 - alpha) * u2
    for comp in (f_v, lambda x, v, z, t: np.full((n_of(x), 1, 1), 1 + scalar(v) ** 2) * x[:, :, None],
                 lambda x, v, z, t: np.sin(scalar(v) + x[:, 0] + a)):
        lhs = relax_coefficient(comp, X, 0, 0, mix, ctrl)
        rhs = alpha * relax_coefficient(comp, X, 0, 0, u1, ctrl) + (1 - alpha) * relax_coefficient(comp, X, 0, 0, u2, ctrl)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-13, atol=1e-13)


# -- beta ------------------------------------------------------------------

def test_diffusion_root_squares_back():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 2, 2))
    b = 0.5 * a @ np.swapaxes(a, 1, 2) + 0.1 * np.eye(2)
    r = diffusion_root(b)
    np.testing.assert_allclose(r @ r, 2 * b, atol=1e-12)
    np.testing.assert_allclose(r, np.swapaxes(r, 1, 2), atol=1e-14)


def test_diffusion_root_clamps_tiny_negative_and_rejects_real_negative():
    b = np.array([[[1.0, 0.0], [0.0, -4e-13]]])
    assert np.all(np.isfinite(diffusion_root(b)))
    with pytest.raises(EllipticityError):
        diffusion_root(np.array([[[1.0, 0.0], [0.0, -1e-6]]]))
    with pytest.raises(EllipticityError):
        diffusion_root(np.array([[[-1e-6]]]))


def test_initial_law_on_grid_and_sampling():
    g = SpatialGrid((0.0,), (1.0,), (21,))
    rho = InitialLaw.uniform().on_grid(g)
    assert g.integrate(rho) == pytest.approx(1.0, abs=1e-12)
    d = InitialLaw.dirac_at(0.33).on_grid(g)
    vals = g.points[:, 0] ** 2
    assert g.pair(d, vals.reshape(g.shape)) == pytest.approx(g.interpolate(vals.reshape(g.shape), [0.33]), abs=1e-14)
    xs = InitialLaw.uniform().sample(np.random.default_rng(1), 20000, g)
    assert xs.min() >= 0 and xs.max() <= 1 and abs(xs.mean() - 0.5) < 0.01
