import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bhjb import pde
from bhjb.errors import DimensionError, LinearSolveError, StabilityError, ValidationFailed
from bhjb.fields import PolicyField, RelaxedPolicy
from bhjb.grid import SpatialGrid
from bhjb.problem import CoefficientField, ControlProblem, ControlSet, InitialLaw, SpatialDomain
from bhjb.tree import ScenarioTree, from_markov_chain

from helpers import chain, const_b, const_phi, exit_time_problem, grid_1d, n_of, problem_1d, scalar


def pol(tree, grid, n=1, idx=0):
    return PolicyField.constant(tree, grid, n, idx)


# -- generator ---------------------------------------------------------------

def test_generator_kills_constants():
    prob = problem_1d(drift=lambda x, v, z, t: np.sin(5 * x), diffusion=lambda x, v, z, t: (1 + x)[:, :, None])
    g = grid_1d(31)
    out = pde.apply_generator(np.full(g.shape, 3.0), 0, [0.0], 0.0, g, prob)
    np.testing.assert_allclose(out, 0.0, atol=1e-9)


def test_generator_exact_on_linear_with_upwind_drift():
    prob = problem_1d(drift=lambda x, v, z, t: np.full((n_of(x), 1), 2.0), diffusion=const_b(0.7))
    g = grid_1d(21)
    out = pde.apply_generator(g.axes[0].copy(), 0, [0.0], 0.0, g, prob)
    np.testing.assert_allclose(g.interior(out), 2.0, rtol=1e-10)
    assert out[0] == 0.0 and out[-1] == 0.0


def test_generator_exact_second_difference_on_quadratic():
    prob = problem_1d(diffusion=const_b(1.0))
    g = grid_1d(17)
    out = pde.apply_generator(g.axes[0] ** 2, 0, [0.0], 0.0, g, prob)
    np.testing.assert_allclose(g.interior(out), 2.0, rtol=1e-10)


def test_generator_matches_matrix_action_and_2d_cross_term():
    dom = SpatialDomain((0, 0), (1, 2))
    g = SpatialGrid.from_domain(dom, (9, 11))

    def b(x, v, z, t):
        out = np.zeros((n_of(x), 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = 0.5
        out[:, 0, 1] = out[:, 1, 0] = 0.2
        return out

    coef = CoefficientField(lambda x, v, z, t: np.column_stack([np.cos(x[:, 1]), -x[:, 0]]), b,
                            lambda x, v, z, t: np.ones(n_of(x)))
    prob = ControlProblem(dom, 1.0, coef, ControlSet([[0.0]]), InitialLaw.uniform())
    # x*y is exact for the mixed stencil: V_xy = 1
    X, Y = np.meshgrid(*g.axes, indexing="ij")
    out = pde.apply_generator(X * Y, 0, [0.0], 0.0, g, prob)
    pts = g.interior_points
    expect = 2 * 0.2 * 1.0 + np.cos(pts[:, 1]) * pts[:, 1] - pts[:, 0] * pts[:, 0]
    np.testing.assert_allclose(g.interior(out), expect, atol=1e-10)
    # against the assembled matrix for data vanishing on the boundary
    V = g.embed(np.random.default_rng(0).normal(size=g.n_interior))
    st_, _ = pde.NodeOperators(prob, g).get([0.0], 0.0)
    np.testing.assert_allclose(g.interior(pde.apply_generator(V, 0, [0.0], 0.0, g, prob)),
                               pde.stencil_matrix(st_[0], g) @ g.interior(V), atol=1e-10)
    assert not pde.is_monotone(st_[0], g)


def test_upwind_1d_stencil_is_m_matrix():
    prob = problem_1d(drift=lambda x, v, z, t: 5 * np.sin(7 * x), diffusion=const_b(0.01))
    g = grid_1d(41)
    st_, _ = pde.NodeOperators(prob, g).get([0.0], 0.0)
    assert pde.is_monotone(st_[0], g)
    np.testing.assert_allclose(st_[0].sum(axis=1), 0.0, atol=1e-9)


# -- backward ---------------------------------------------------------------

def test_zero_cost_gives_zero_value():
    prob = problem_1d(cost=const_phi(0.0))
    t, g = chain(1.0, 10), grid_1d(21)
    V = pde.solve_backward_fixed_control(prob, t, g, pol(t, g))
    assert np.all(V.values == 0.0)


def test_exit_time_value_at_center():
    prob = exit_time_problem()
    t, g = chain(5.0, 500), grid_1d(200)
    V = pde.solve_backward_fixed_control(prob, t, g, pol(t, g))
    assert abs(g.interpolate(V.root(), [0.5]) - 0.25) <= 2e-3
    x = g.axes[0]
    assert np.max(np.abs(V.root() - x * (1 - x))) <= 2e-3
    assert np.all(V.values[:, 0] == 0) and np.all(V.values[:, -1] == 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_random_nonnegative_cost_gives_nonnegative_value(seed):
    rng = np.random.default_rng(seed)
    a, c, w = rng.uniform(0, 2, 3)
    prob = problem_1d(drift=lambda x, v, z, t: (a * np.sin(w * 6 * x) - c),
                      diffusion=lambda x, v, z, t: (0.05 + a * x ** 2)[:, :, None],
                      cost=lambda x, v, z, t: np.maximum(np.sin(10 * w * x[:, 0] + t), 0.0))
    t, g = chain(1.0, 20), grid_1d(41)
    V = pde.solve_backward_fixed_control(prob, t, g, pol(t, g))
    assert V.values.min() >= -1e-12


def test_explicit_scheme_refuses_unstable_step():
    prob = exit_time_problem(horizon=1.0)
    g = grid_1d(51)
    with pytest.raises(StabilityError) as err:
        pde.solve_backward_fixed_control(prob, chain(1.0, 10), g, pol(chain(1.0, 10), g), theta=0.0)
    h = 1 / 50
    assert err.value.bound == pytest.approx(h * h / (2 * 0.5), rel=1e-12)
    t = chain(1.0, 2600)
    Ve = pde.solve_backward_fixed_control(prob, t, g, pol(t, g), theta=0.0)
    Vi = pde.solve_backward_fixed_control(prob, t, g, pol(t, g), theta=1.0)
    assert np.max(np.abs(Ve.root() - Vi.root())) < 1e-3


def test_crank_nicolson_is_more_accurate_in_time():
    prob = exit_time_problem(horizon=0.2)
    g = grid_1d(101)
    fine = chain(0.2, 400)
    ref = pde.solve_backward_fixed_control(prob, fine, g, pol(fine, g), theta=0.5).root()
    t = chain(0.2, 20)
    e1 = np.max(np.abs(pde.solve_backward_fixed_control(prob, t, g, pol(t, g), theta=1.0).root() - ref))
    e2 = np.max(np.abs(pde.solve_backward_fixed_control(prob, t, g, pol(t, g), theta=0.5).root() - ref))
    assert e2 < e1


def test_singular_step_raises_with_residual():
    g = grid_1d(6)
    coef = np.zeros((4, 3))
    coef[:, 1] = 1.0  # I - 1 * A has a zero diagonal
    with pytest.raises(LinearSolveError) as err:
        pde._implicit_solve(coef, np.ones(4), 1.0, g)
    assert not err.value.residual <= 1e-10


def test_solvers_reject_invalid_inputs():
    bad = problem_1d(diffusion=lambda x, v, z, t: np.full((n_of(x), 1, 1), -1.0))
    t, g = chain(1.0, 5), grid_1d(11)
    with pytest.raises(ValidationFailed):
        pde.solve_backward_fixed_control(bad, t, g, pol(t, g))
    with pytest.raises(ValidationFailed):
        pde.solve_forward_kolmogorov(bad, t, g, pol(t, g))
    with pytest.raises(DimensionError):
        pde.solve_backward_fixed_control(problem_1d(horizon=2.0), t, g, pol(t, g))
    broken = ScenarioTree([0.0, 1.0], [0, 1, 1], np.zeros((3, 1)), [-1, 0, 0], [1.0, 0.5, 0.6])
    with pytest.raises(ValidationFailed):
        pde.solve_backward_fixed_control(problem_1d(), broken, g, pol(broken, g))


def test_relaxed_one_hot_policy_reproduces_hard_policy():
    prob = problem_1d(drift=lambda x, v, z, t: np.full((n_of(x), 1), scalar(v)), controls=((-1.0,), (1.0,)))
    t, g = chain(1.0, 10), grid_1d(21)
    idx = np.zeros((t.n_nodes, 21), dtype=int)
    idx[:, 10:] = 1
    hard = PolicyField(idx, t, g, 2)
    a = pde.solve_backward_fixed_control(prob, t, g, hard)
    b = pde.solve_backward_fixed_control(prob, t, g, RelaxedPolicy.from_policy(hard))
    np.testing.assert_allclose(a.values, b.values, atol=1e-15)


# -- forward ----------------------------------------------------------------

def test_forward_symmetry_and_mass():
    prob = exit_time_problem(horizon=1.0)
    t = from_markov_chain([0.0, 1.0], [[0.5, 0.5], [0.5, 0.5]], 3, times=[0, .2, .5, 1.0])
    g = grid_1d(41)
    D = pde.solve_forward_kolmogorov(prob, t, g, pol(t, g))
    np.testing.assert_allclose(D.values, D.values[:, ::-1], atol=1e-10)
    mass = D.mass()
    assert mass[t.root] == pytest.approx(1.0, abs=1e-8)
    for n in range(t.n_nodes):
        if t.parent[n] >= 0:
            assert mass[n] <= mass[t.parent[n]] + 1e-14


def dense_generator(prob, g, v, z, t):
    """Dense A by applying the generator to unit vectors (interior unknowns)."""
    cols = []
    for j in range(g.n_interior):
        e = np.zeros(g.n_interior)
        e[j] = 1.0
        cols.append(g.interior(pde.apply_generator(g.embed(e), v, z, t, g, prob)))
    return np.column_stack(cols)


@pytest.mark.parametrize("theta", [1.0, 0.5])
def test_adjoint_against_dense_transpose_oracle(theta):
    prob = problem_1d(drift=lambda x, v, z, t: (z[0] * np.cos(4 * x) + scalar(v)),
                      diffusion=lambda x, v, z, t: (0.05 + 0.1 * x ** 2)[:, :, None],
                      cost=lambda x, v, z, t: 1 + x[:, 0], controls=((-0.5,), (0.5,)))
    t = from_markov_chain([1.0, -2.0], [[0.3, 0.7], [0.6, 0.4]], 3, times=[0, .1, .25, .4])
    prob = ControlProblem(prob.domain, 0.4, prob.coefficients, prob.controls, InitialLaw.dirac_at(0.37))
    g = grid_1d(20)
    rng = np.random.default_rng(4)
    policy = PolicyField(rng.integers(0, 2, size=(t.n_nodes, 20)), t, g, 2)
    psi = np.sin(3 * g.axes[0]) + 0.5

    D = pde.solve_forward_kolmogorov(prob, t, g, policy, theta=theta)
    # oracle forward with dense transposes
    P = np.zeros((t.n_nodes, g.n_interior))
    P[t.root] = g.interior(InitialLaw.dirac_at(0.37).on_grid(g))
    for k in range(t.n_levels):
        dt = t.dt(k)
        for n in t.by_level[k]:
            idx = policy.interior_indices(n)
            A = np.zeros((g.n_interior, g.n_interior))
            for c in range(2):
                Ac = dense_generator(prob, g, c, t.z[n], t.times[k])
                A[idx == c] = Ac[idx == c]
            I = np.eye(g.n_interior)
            q = np.linalg.solve((I - theta * dt * A).T, P[n])
            nxt = (I + (1 - theta) * dt * A).T @ q
            for ch in t.children[n]:
                P[ch] = nxt
    for n in range(t.n_nodes):
        if t.level[n] > 0:
            np.testing.assert_allclose(g.interior(D.values[n]), P[n], atol=1e-12)

    V = pde.solve_backward_fixed_control(prob, t, g, policy, theta=theta, terminal=psi,
                                         source=np.zeros((t.n_nodes, 20)))
    lhs = pde.terminal_pairing(D, g.embed(g.interior(psi)))
    rhs = pde.pair_initial(prob.initial_law, V)
    assert abs(lhs - rhs) <= 1e-10


def test_cost_duality_with_running_cost():
    prob = problem_1d(drift=lambda x, v, z, t: z[0] * np.sin(6 * x),
                      cost=lambda x, v, z, t: np.exp(-x[:, 0]) * (1 + t), horizon=1.0)
    t = from_markov_chain([0.5, -1.0], [[0.5, 0.5], [0.2, 0.8]], 4, times=np.linspace(0, 1, 5))
    g = grid_1d(60)
    V = pde.solve_backward_fixed_control(prob, t, g, pol(t, g))
    D = pde.solve_forward_kolmogorov(prob, t, g, pol(t, g))
    assert abs(pde.pair_initial(prob.initial_law, V) - pde.expected_cost(prob, t, g, pol(t, g), D)) <= 1e-8


def test_pair_initial_examples():
    t, g = chain(1.0, 1), grid_1d(201)
    from bhjb.fields import ValueField

    V = ValueField.zeros(t, g)
    assert pde.pair_initial(InitialLaw.uniform(), V) == 0.0
    x = g.axes[0]
    V.values[0] = x * (1 - x)
    assert pde.pair_initial(InitialLaw.uniform(), V) == pytest.approx(1 / 6, abs=1e-4)
    assert pde.pair_initial(InitialLaw.dirac_at(0.5), V) == pytest.approx(0.25, abs=1e-4)
    with pytest.raises(DimensionError):
        pde.pair_initial(InitialLaw.dirac_at(1.5), V)


def test_2d_diagonal_positivity_and_duality():
    dom = SpatialDomain((0, 0), (1, 1))
    g = SpatialGrid.from_domain(dom, (15, 13))

    def b(x, v, z, t):
        out = np.zeros((n_of(x), 2, 2))
        out[:, 0, 0] = 0.3 + 0.2 * x[:, 1]
        out[:, 1, 1] = 0.2
        return out

    coef = CoefficientField(lambda x, v, z, t: np.column_stack([np.sin(6 * x[:, 1]), 0.5 - x[:, 0]]), b,
                            lambda x, v, z, t: 1 + x[:, 0] * x[:, 1])
    prob = ControlProblem(dom, 0.5, coef, ControlSet([[0.0]]), InitialLaw.uniform())
    t = chain(0.5, 10)
    V = pde.solve_backward_fixed_control(prob, t, g, pol(t, g))
    D = pde.solve_forward_kolmogorov(prob, t, g, pol(t, g))
    assert V.values.min() >= -1e-12
    assert D.values.min() >= -1e-12
    assert np.all(g.interior(D.values[5]) > 0)
    assert abs(pde.pair_initial(prob.initial_law, V) - pde.expected_cost(prob, t, g, pol(t, g), D)) <= 1e-8


def test_2d_cross_term_positivity_with_tolerance():
    dom = SpatialDomain((0, 0), (1, 1))
    g = SpatialGrid.from_domain(dom, (17, 17))

    def b(x, v, z, t):
        out = np.zeros((n_of(x), 2, 2))
        out[:, 0, 0] = out[:, 1, 1] = 0.5
        out[:, 0, 1] = out[:, 1, 0] = 0.1
        return out

    coef = CoefficientField(lambda x, v, z, t: np.zeros((n_of(x), 2)), b, lambda x, v, z, t: np.ones(n_of(x)))
    prob = ControlProblem(dom, 0.5, coef, ControlSet([[0.0]]), InitialLaw.dirac_at([0.3, 0.6]))
    t = chain(0.5, 10)
    V = pde.solve_backward_fixed_control(prob, t, g, pol(t, g))
    D = pde.solve_forward_kolmogorov(prob, t, g, pol(t, g))
    assert V.values.min() >= -1e-8 and D.values.min() >= -1e-8
    assert abs(pde.pair_initial(prob.initial_law, V) - pde.expected_cost(prob, t, g, pol(t, g), D)) <= 1e-8


# -- regularity probe -------------------------------------------------------

def psi_modes(seed, count=3):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        a = rng.normal(size=4)
        out.append(lambda x, t, z, a=a: sum(a[j] * np.sin((j + 1) * np.pi * x[:, 0]) for j in range(4)) * (1 + t))
    return out


def test_probe_zero_source_ratio_zero():
    prob = exit_time_problem(horizon=0.5)
    t, g = chain(0.5, 10), grid_1d(21)
    res = pde.condition1_bound_probe(prob, t, g, pol(t, g), [lambda x, t_, z: np.zeros(x.shape[0])])
    assert res.ratios.tolist() == [0.0]


def test_probe_stable_under_refinement_for_constant_b():
    prob = exit_time_problem(horizon=0.5)
    t = chain(0.5, 20)
    study = pde.condition1_refinement_study(prob, t, [(21,), (41,), (81,)], lambda g: pol(t, g), psi_modes(0))
    assert all(0.5 <= gr <= 2.0 for gr in study.growth), study.growth
    assert not study.flagged
