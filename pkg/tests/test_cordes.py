import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bhjb.cordes import (
    CaseIIIParams,
    SampleSet,
    case_iii_lhs_terms,
    certify,
    check_case_i,
    check_case_ii,
    check_case_iii,
    ellipticity_constant,
)
from bhjb.errors import ConfigError, DimensionError

from helpers import n_of, problem_1d, scalar


def samples(n=1, count=50, v=((0.0,),)):
    x = np.random.default_rng(0).uniform(0, 1, size=(count, n))
    return SampleSet(x, np.array([0.0, 0.5]), np.zeros((1, 1)), np.asarray(v, dtype=float))


def const(mat):
    mat = np.atleast_2d(mat)
    return lambda x, *a: np.broadcast_to(mat, (n_of(x),) + mat.shape).copy()


def test_ellipticity_examples():
    assert ellipticity_constant(const(np.eye(2)), samples(2)) == pytest.approx(1.0)
    assert ellipticity_constant(const(np.diag([2.0, 0.5])), samples(2)) == pytest.approx(0.5)


def test_ellipticity_oscillating_offdiagonal_against_dense_sampling():
    def bbar(x, z, t):
        s = 0.3 * np.sin(x[:, 0])
        out = np.zeros((n_of(x), 2, 2))
        out[:, 0, 0] = out[:, 1, 1] = 1.0
        out[:, 0, 1] = out[:, 1, 0] = s
        return out

    x = np.column_stack([np.linspace(0, 2 * np.pi, 1000), np.zeros(1000)])
    ss = SampleSet(x, np.array([0.0]), np.zeros((1, 1)), np.zeros((1, 1)))
    c = ellipticity_constant(bbar, ss)
    brute = np.min(1 - 0.3 * np.abs(np.sin(x[:, 0])))
    assert c == pytest.approx(brute, abs=1e-12)
    assert c == pytest.approx(0.7, abs=1e-3)


def test_ellipticity_rejects_asymmetric_sample():
    with pytest.raises(DimensionError, match="not symmetric"):
        ellipticity_constant(const([[1.0, 0.1], [0.0, 1.0]]), samples(2))


@pytest.mark.parametrize("bhat,passed,S", [(0.5, True, 0.25), (1.1, False, 1.21), (0.0, True, 0.0)])
def test_case_ii_examples(bhat, passed, S):
    rep = check_case_ii(const(1.0), const(bhat), 1, samples())
    assert rep.passed is passed
    assert rep.lhs == pytest.approx(S, abs=1e-12)
    assert rep.margin == pytest.approx(S - 1.0, abs=1e-12)
    assert rep.passed == (rep.margin < 0)


def test_case_iii_zero_bhat_passes():
    rep = check_case_iii(const(np.eye(2)), const(np.zeros((2, 2))), CaseIIIParams([1], [0.7]), samples(2))
    assert rep.passed and rep.lhs == 0.0


@pytest.mark.parametrize("s", [0.3, 0.99, 1.0, 1.2])
def test_case_iii_hand_evaluation(s):
    bh = np.array([[s, 0.0], [0.0, 0.0]])
    rep = check_case_iii(const(np.eye(2)), const(bh), CaseIIIParams([1], [1.0]), samples(2))
    assert rep.lhs == pytest.approx(s * s, abs=1e-14)
    assert rep.passed is (abs(s) < 1)


def test_case_iii_brute_force_sampler():
    """Independent loop evaluation of the displayed sum on random symmetric matrices."""
    rng = np.random.default_rng(3)
    params = CaseIIIParams([1, 2], [0.5, 1.5])
    n = 3
    for _ in range(20):
        a = rng.normal(size=(n, n))
        m = a + a.T
        m[2, 2] = 0.0
        ref = 0.0
        for kk, g in zip([0, 1], [0.5, 1.5]):
            for i in range(n):
                ref += (1.0 if i in (0, 1) else 4.0) * m[i, kk] ** 2
            ref += g / (2 - g) * m[kk, kk] ** 2
        assert case_iii_lhs_terms(m[None], params)[0] == pytest.approx(ref, rel=1e-14)


def test_case_iii_structure_violation_fails_with_witness():
    bh = np.zeros((2, 2))
    bh[1, 1] = 0.01
    rep = check_case_iii(const(np.eye(2)), const(bh), CaseIIIParams([1], [1.0]), samples(2))
    assert not rep.passed and rep.witness is not None and "outside" in rep.message


def test_case_iii_param_invariants():
    with pytest.raises(ConfigError):
        CaseIIIParams([1], [2.0])
    with pytest.raises(ConfigError):
        CaseIIIParams([], [])
    with pytest.raises(ConfigError):
        check_case_iii(const(np.eye(2)), const(np.zeros((2, 2))), CaseIIIParams([3], [1.0]), samples(2))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.01, 0.99))
def test_scaling_bhat_down_never_breaks_a_pass(s, c):
    ss = samples()
    before = check_case_ii(const(1.0), const(s), 1, ss)
    after = check_case_ii(const(1.0), const(c * s), 1, ss)
    assert after.lhs == pytest.approx(c * c * before.lhs, rel=1e-12, abs=1e-300)
    if before.passed:
        assert after.passed
    bh = np.array([[s, 0.0], [0.0, 0.0]])
    p = CaseIIIParams([1], [1.0])
    b3 = check_case_iii(const(np.eye(2)), const(bh), p, samples(2))
    a3 = check_case_iii(const(np.eye(2)), const(c * bh), p, samples(2))
    if b3.passed:
        assert a3.passed


def test_case_i_detection_and_auto():
    prob = problem_1d(controls=((-1.0,), (1.0,)))
    rep = certify(prob, budget=32)
    assert rep.case == "i" and rep.passed
    dep = problem_1d(diffusion=lambda x, v, z, t: np.full((n_of(x), 1, 1), 1.0 + 0.5 * scalar(v)),
                     controls=((-1.0,), (1.0,)))
    assert not check_case_i(dep.coefficients.eval_diffusion, samples(v=((-1.0,), (1.0,)))).passed
    auto = certify(dep, budget=32)
    assert auto.case == "ii" and auto.passed and auto.margin == pytest.approx(-0.75)


def test_reports_are_deterministic():
    dep = problem_1d(diffusion=lambda x, v, z, t: (1.0 + 0.9 * scalar(v) * np.sin(x[:, 0]))[:, None, None],
                     controls=((-1.0,), (1.0,)))
    assert certify(dep, budget=64).to_dict() == certify(dep, budget=64).to_dict()
