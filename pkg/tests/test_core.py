import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from entot import (
    ConstraintOperator,
    CostMatrix,
    DegenerateInstanceError,
    DomainError,
    DualPotentials,
    ExponentOverflowError,
    Histogram,
    RegularizedInstance,
    bound_R,
    bound_R_hat,
    dual_f,
    exp_dual_phi,
    gain_rho,
    grad_exp_phi,
    grad_f,
    grad_phi,
    is_feasible,
    primal_from_dual,
    primal_objective,
    residual_E,
    reweight_marginals,
    round_to_polytope,
    scaling_matrix,
    schedule_eta_eps,
    semi_dual_phi,
)
from entot.harness import metric_d

from .conftest import E2_COST, HALF, random_instance

mp.mp.dps = 40


def pots(u, v):
    return DualPotentials(np.asarray(u, float), np.asarray(v, float))


# --- types -----------------------------------------------------------------


def test_histogram_validates():
    Histogram([0.25, 0.75])
    with pytest.raises(DomainError):
        Histogram([0.5, 0.6])
    with pytest.raises(DomainError):
        Histogram([1.5, -0.5])
    h = Histogram([0.5, 0.5])
    with pytest.raises(ValueError):
        h.weights[0] = 1.0


def test_cost_matrix_max_is_exact():
    C = CostMatrix([[0.0, 3.5], [2.0, 1.0]])
    assert C.max_abs == 3.5
    with pytest.raises(DomainError):
        CostMatrix([[0.0, -1.0], [0.0, 0.0]])
    with pytest.raises(DomainError):
        CostMatrix(np.zeros((2, 3)))


def test_instance_checks_eta_and_dims():
    with pytest.raises(DomainError):
        RegularizedInstance(E2_COST, HALF, HALF, 0.0)
    with pytest.raises(DomainError):
        RegularizedInstance(E2_COST, [1.0], HALF, 1.0)


def test_potentials_lambda_roundtrip():
    p = pots([0.1, -0.3], [0.7, 0.2])
    lam = p.to_lambda(2.0)
    np.testing.assert_allclose(lam.u, 2.0 * (p.u + 0.5))
    back = lam.to_scaled(2.0)
    np.testing.assert_allclose(back.u, p.u)
    np.testing.assert_allclose(back.v, p.v)
    with pytest.raises(DomainError):
        pots([np.inf, 0.0], [0.0, 0.0])


# --- scaling matrix, f, E ------------------------------------------------------


def test_scaling_matrix_examples(e2):
    B = scaling_matrix(DualPotentials.zeros(2), e2)
    np.testing.assert_allclose(B, [[1.0, math.exp(-1)], [math.exp(-1), 1.0]], rtol=1e-15)
    inst = RegularizedInstance(np.zeros((2, 2)), HALF, HALF, 1.0)
    B = scaling_matrix(pots([math.log(2), 0.0], [0.0, math.log(3)]), inst)
    np.testing.assert_allclose(B, [[2, 6], [1, 3]], rtol=1e-14)


def test_scaling_matrix_schedule_example():
    eta = 1.0 / (4 * math.log(2))
    oracle = float(mp.e ** (-1 / (mp.mpf(1) / (4 * mp.log(2)))))
    assert abs(oracle - 0.0625) < 1e-15
    inst = RegularizedInstance(np.ones((2, 2)), HALF, HALF, eta)
    np.testing.assert_allclose(scaling_matrix(DualPotentials.zeros(2), inst), np.full((2, 2), oracle), rtol=1e-14)


def test_scaling_matrix_overflow_names_exponent():
    inst = RegularizedInstance(np.zeros((2, 2)), HALF, HALF, 1.0)
    with pytest.raises(ExponentOverflowError, match="exponent 900"):
        scaling_matrix(pots([800.0, 0.0], [100.0, 0.0]), inst)


def test_dual_f_examples(e2):
    oracle = float(2 + 2 * mp.e ** -1)
    assert abs(oracle - 2.735759) < 1e-6
    assert dual_f(DualPotentials.zeros(2), e2) == pytest.approx(oracle, rel=1e-14)
    one = RegularizedInstance([[0.0]], [1.0], [1.0], 1.0)
    assert dual_f(DualPotentials.zeros(1), one) == pytest.approx(1.0)
    assert dual_f(pots([0.3, 0.3], [-0.3, -0.3]), e2) == pytest.approx(oracle, rel=1e-14)


def test_dual_f_stays_finite_when_representable():
    inst = RegularizedInstance(np.full((2, 2), 1000.0), HALF, HALF, 1.0)
    # every exponent is -1000 + 1000 = 0
    assert dual_f(pots([500.0, 500.0], [500.0, 500.0]), inst) == pytest.approx(4.0 - 1000.0)


def test_grad_f_and_residual_examples(e2):
    rr, cr = grad_f(DualPotentials.zeros(2), e2)
    oracle = float(1 + mp.e ** -1 - mp.mpf(1) / 2)
    assert abs(oracle - 0.867879) < 1e-6
    np.testing.assert_allclose(rr, [oracle, oracle], rtol=1e-14)
    np.testing.assert_allclose(cr, rr)
    assert residual_E(DualPotentials.zeros(2), e2) == pytest.approx(4 * oracle, rel=1e-14)
    assert abs(4 * oracle - 3.471517) < 1e-6
    one = RegularizedInstance([[0.0]], [1.0], [1.0], 1.0)
    assert residual_E(DualPotentials.zeros(1), one) == 0.0


def _fd_check(fun, grad, x, h=1e-6):
    g = grad(x)
    fd = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        fd[k] = (fun(x + e) - fun(x - e)) / (2 * h)
    return np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-300)


def test_grad_f_matches_finite_differences():
    rng = np.random.default_rng(7)
    inst = random_instance(rng, 5)
    n = inst.n
    for _ in range(20):
        x = rng.normal(scale=0.5, size=2 * n)
        fun = lambda z: dual_f(DualPotentials.from_stacked(z), inst)
        grad = lambda z: np.concatenate(grad_f(DualPotentials.from_stacked(z), inst))
        assert _fd_check(fun, grad, x) <= 1e-5


# --- gain ----------------------------------------------------------------------


def test_gain_examples():
    assert gain_rho(0.37, 0.37) == 0.0
    assert gain_rho(0.0, 0.25) == 0.25
    oracle = float(mp.mpf("1.367879") - mp.mpf("0.5") + mp.mpf("0.5") * mp.log(mp.mpf("0.5") / mp.mpf("1.367879")))
    assert abs(oracle - 0.364675) < 1e-6
    assert gain_rho(0.5, 1.367879) == pytest.approx(oracle, rel=1e-14)
    with pytest.raises(DomainError):
        gain_rho(0.5, 0.0)
    with pytest.raises(DomainError):
        gain_rho(-0.1, 0.5)


@given(st.floats(1e-6, 10.0), st.floats(-0.5, 0.5))
def test_gain_relative_accuracy_near_match(a, rel):
    b = a * (1.0 + rel)
    exact = mp.mpf(b) - mp.mpf(a) + mp.mpf(a) * mp.log(mp.mpf(a) / mp.mpf(b))
    got = gain_rho(a, b)
    assert got >= 0.0
    if exact > 0:
        assert abs(got - float(exact)) <= 1e-13 * float(exact) + 1e-300


@given(st.floats(-300, 2), st.floats(-12, 12))
def test_gain_relative_accuracy_wide_range(log_a, log_ratio):
    a = 10.0 ** log_a
    b = a * 10.0 ** log_ratio
    exact = mp.mpf(b) - mp.mpf(a) + mp.mpf(a) * mp.log(mp.mpf(a) / mp.mpf(b))
    got = gain_rho(a, b)
    if exact > 0:
        assert abs(got - float(exact)) <= 1e-13 * float(exact)


@given(st.floats(0.0, 5.0), st.floats(1e-8, 5.0))
def test_gain_nonnegative(a, b):
    assert gain_rho(a, b) >= 0.0


# --- multiplier duals ----------------------------------------------------------


def test_semi_dual_phi_examples(e2):
    oracle = float(mp.log(2 * (mp.e ** -1 + mp.e ** -2)))
    assert abs(oracle - 0.006409) < 1e-6
    assert semi_dual_phi(DualPotentials.zeros(2), e2) == pytest.approx(oracle, rel=1e-12)
    flat = RegularizedInstance(np.ones((2, 2)), HALF, HALF, 1.0)
    closed = 2 * math.log(2) - 1 - 1
    # eta*log(n^2 e^{-1/eta - 1}) with n = 2, eta = 1
    assert semi_dual_phi(DualPotentials.zeros(2), flat) == pytest.approx(closed, abs=1e-14)


def test_constant_cost_phi_value():
    # the uniform plan has value eta*(2 ln n - 1) - 1 at lambda = 0 for C = 1 1'
    for n, eta in [(2, 1.0), (3, 0.4), (5, 2.0)]:
        inst = RegularizedInstance(np.ones((n, n)), np.full(n, 1 / n), np.full(n, 1 / n), eta)
        assert semi_dual_phi(DualPotentials.zeros(n), inst) == pytest.approx(eta * (2 * math.log(n) - 1) - 1)


def test_primal_from_dual_examples(e2):
    X = primal_from_dual(DualPotentials.zeros(2), e2)
    a = float(mp.e / (2 * (mp.e + 1)))
    assert abs(a - 0.365530) < 1e-6
    np.testing.assert_allclose(X, [[a, 0.5 - a], [0.5 - a, a]], rtol=1e-14)
    flat = RegularizedInstance(np.ones((3, 3)), np.full(3, 1 / 3), np.full(3, 1 / 3), 0.7)
    np.testing.assert_allclose(primal_from_dual(pots([2.0] * 3, [2.0] * 3), flat), np.full((3, 3), 1 / 9))
    rng = np.random.default_rng(3)
    inst = random_instance(rng, 4)
    for _ in range(20):
        lam = DualPotentials.from_stacked(rng.normal(size=8))
        assert primal_from_dual(lam, inst).sum() == pytest.approx(1.0, abs=1e-14)


def test_grad_phi_examples(e2):
    np.testing.assert_allclose(grad_phi(DualPotentials.zeros(2), e2), 0.0, atol=1e-15)
    flat = RegularizedInstance(np.ones((4, 4)), np.full(4, 0.25), np.full(4, 0.25), 0.3)
    np.testing.assert_allclose(grad_phi(DualPotentials.zeros(4), flat), 0.0, atol=1e-15)


def test_grad_phi_is_marginal_violation():
    rng = np.random.default_rng(11)
    inst = random_instance(rng, 4)
    lam = DualPotentials.from_stacked(rng.normal(size=8))
    X = primal_from_dual(lam, inst)
    g = grad_phi(lam, inst)
    assert np.abs(g).sum() == pytest.approx(metric_d(X, inst.r.weights, inst.c.weights), rel=1e-12)


@pytest.mark.parametrize("family", ["random", "image"])
def test_grad_phi_matches_finite_differences(family):
    rng = np.random.default_rng(5)
    if family == "random":
        inst = random_instance(rng, 5, eta=0.8)
    else:
        from entot import synthetic_instance

        s = synthetic_instance(1, 3, 0.5)
        inst = RegularizedInstance(s.cost, s.r, s.c, 2.0)
    n = inst.n
    for _ in range(20):
        x = rng.normal(scale=0.5, size=2 * n)
        fun = lambda z: semi_dual_phi(DualPotentials.from_stacked(z), inst)
        grad = lambda z: grad_phi(DualPotentials.from_stacked(z), inst)
        assert _fd_check(fun, grad, x) <= 1e-5
        fun = lambda z: exp_dual_phi(DualPotentials.from_stacked(z), inst)
        grad = lambda z: grad_exp_phi(DualPotentials.from_stacked(z), inst)
        assert _fd_check(fun, grad, x) <= 1e-5


def test_exp_dual_phi_example(e2):
    oracle = float(2 * (mp.e ** -1 + mp.e ** -2))
    assert abs(oracle - 1.006429) < 1e-6
    assert exp_dual_phi(DualPotentials.zeros(2), e2) == pytest.approx(oracle, rel=1e-14)


vec = hnp.arrays(np.float64, 4, elements=st.floats(-3, 3))


@given(vec, vec, st.floats(-5, 5))
def test_shift_invariance(u, v, s):
    rng = np.random.default_rng(0)
    inst = random_instance(rng, 4)
    base = dual_f(pots(u, v), inst)
    assert dual_f(pots(u + s, v - s), inst) == pytest.approx(base, rel=1e-12, abs=1e-12)
    base = semi_dual_phi(pots(u, v), inst)
    assert semi_dual_phi(pots(u + s, v - s), inst) == pytest.approx(base, rel=1e-12, abs=1e-12)


@given(hnp.arrays(np.float64, 8, elements=st.floats(-2, 2)),
       hnp.arrays(np.float64, 8, elements=st.floats(-2, 2)),
       st.sampled_from([0.2, 1.0, 3.0]))
def test_linf_smoothness_of_phi(l1, l2, eta):
    rng = np.random.default_rng(1)
    inst = random_instance(rng, 4, eta=eta)
    a, b = DualPotentials.from_stacked(l1), DualPotentials.from_stacked(l2)
    gap = semi_dual_phi(a, inst) - semi_dual_phi(b, inst) - grad_phi(b, inst) @ (l1 - l2)
    bound = 4.0 / (2 * eta) * np.max(np.abs(l1 - l2)) ** 2
    assert gap - bound <= 1e-10


# --- primal side -----------------------------------------------------------------


def test_primal_objective_examples():
    assert primal_objective(np.full((2, 2), 0.25), np.ones((2, 2)), 1.0) == pytest.approx(1 - math.log(4))
    assert primal_objective(np.diag([0.5, 0.5]), E2_COST, 0.0) == 0.0
    val = primal_objective(np.array([[0.5, 0.0], [0.25, 0.25]]), E2_COST, 1.0)
    assert math.isfinite(val)


def test_reweight_examples():
    r, _ = reweight_marginals([1.0, 0.0], [0.5, 0.5], 0.08)
    np.testing.assert_allclose(r.weights, [0.99 + 0.005, 0.005], rtol=1e-15)
    u = np.full(5, 0.2)
    r, c = reweight_marginals(u, u, 0.3)
    np.testing.assert_array_equal(r.weights, u)


@given(hnp.arrays(np.float64, 6, elements=st.floats(0, 1)), st.floats(1e-6, 1.0))
def test_reweight_properties(w, eps_prime):
    if w.sum() <= 0:
        w = np.ones(6)
    w = w / w.sum()
    r, c = reweight_marginals(w, w, eps_prime)
    assert r.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert r.weights.min() >= eps_prime / (8 * 6) * (1 - 1e-12)
    assert np.abs(r.weights - w).sum() <= eps_prime / 4 + 1e-15


def test_rounding_examples():
    X = round_to_polytope(np.full((2, 2), 0.25), [0.7, 0.3], [0.5, 0.5])
    np.testing.assert_allclose(X, [[0.35, 0.35], [0.15, 0.15]], atol=1e-15)
    F = np.array([[0.2, 0.3], [0.4, 0.1]])
    np.testing.assert_allclose(round_to_polytope(F, [0.5, 0.5], [0.6, 0.4]), F, atol=1e-16)
    np.testing.assert_allclose(round_to_polytope(np.diag([0.6, 0.6]), HALF, HALF), np.diag([0.5, 0.5]), atol=1e-15)


@given(hnp.arrays(np.float64, (4, 4), elements=st.floats(0, 2)),
       hnp.arrays(np.float64, 4, elements=st.floats(0.01, 1)),
       hnp.arrays(np.float64, 4, elements=st.floats(0.01, 1)))
def test_rounding_guarantee(X, r, c):
    r, c = r / r.sum(), c / c.sum()
    Y = round_to_polytope(X, r, c)
    assert is_feasible(Y, r, c)
    assert np.abs(Y - X).sum() <= 2 * metric_d(X, r, c) + 1e-12


def test_constraint_operator_matches_sums():
    rng = np.random.default_rng(2)
    X = rng.random((5, 5))
    A = ConstraintOperator(5, np.zeros(10))
    out = A.apply(X.ravel())
    np.testing.assert_array_equal(out[:5], X.sum(axis=1))
    np.testing.assert_array_equal(out[5:], X.sum(axis=0))
    # ||A||_{1->1} is the largest column l1 norm; every column has two ones
    dense = np.zeros((10, 25))
    for k in range(25):
        e = np.zeros(25)
        e[k] = 1.0
        dense[:, k] = A.apply(e)
    assert np.abs(dense).sum(axis=0).max() == A.norm_1to1 == 2.0
    lam = rng.normal(size=10)
    assert A.adjoint(lam).ravel() @ X.ravel() == pytest.approx(lam @ out)


# --- bounds and schedule ------------------------------------------------------------


def test_bound_R_examples():
    inst = RegularizedInstance(E2_COST, HALF, HALF, 1.0)
    assert bound_R(inst) == pytest.approx(1 + 3 * math.log(2))
    assert abs(1 + 3 * math.log(2) - 3.079442) < 1e-6
    flat = RegularizedInstance(np.ones((4, 4)), np.full(4, 0.25), np.full(4, 0.25), 0.25)
    assert bound_R(flat) == pytest.approx(4 + 3 * math.log(4))
    assert abs(4 + 3 * math.log(4) - 8.158883) < 1e-6
    assert bound_R_hat(inst) == pytest.approx(1.0 * (bound_R(inst) + 0.5))
    with pytest.raises(DomainError):
        bound_R(RegularizedInstance(E2_COST, [1.0, 0.0], HALF, 1.0))


def test_bound_R_decreases_in_eta():
    vals = [bound_R(RegularizedInstance(E2_COST, HALF, HALF, eta)) for eta in (0.1, 0.5, 1, 4)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_schedule_examples():
    eta, eps_prime = schedule_eta_eps(1.0, 2, 1.0)
    assert eta == pytest.approx(1 / (4 * math.log(2)))
    assert abs(eta - 0.360674) < 1e-6
    assert eps_prime == 0.125
    eta0 = 0.37
    assert schedule_eta_eps(4 * math.log(7) * eta0, 7, 1.0)[0] == pytest.approx(eta0)
    assert schedule_eta_eps(1.0, 2, 38.0)[1] == pytest.approx(1 / 304)
    with pytest.raises(DegenerateInstanceError):
        schedule_eta_eps(1.0, 2, 0.0)
