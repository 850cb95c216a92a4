import numpy as np
import pytest
from hypothesis import given, strategies as st

from tvbilevel.activesets import (SET_NAMES, check_m_stationarity, classify, cone_membership,
                                  directional_derivative_fd, solve_sensitivity_system)
from tvbilevel.data import two_pixel_dataset
from tvbilevel.denoise import DenoiseProblem, solve_tv
from tvbilevel.exceptions import AssumptionViolated, InfeasibleDual
from tvbilevel.grid import apply_K, make_gradient_operator, row_norms

from conftest import blocky


def hand_partition(u, q, alpha, op, eps):
    """Row-by-row classification written directly from the set definitions."""
    gn = row_norms(apply_K(op, u))
    qn = row_norms(q)
    out = []
    for j in range(op.n):
        zero_grad = gn[j] <= eps
        zero_a = alpha[j] <= eps
        if not zero_grad:
            out.append("zero_inactive" if zero_a else "inactive")
        elif qn[j] < alpha[j] - eps:
            out.append("strongly_active")
        else:
            out.append("triactive" if zero_a else "biactive")
    return out


def labels(part):
    names = np.empty(part.n, dtype=object)
    for name in SET_NAMES:
        names[getattr(part, name)] = name
    return list(names)


def test_two_pixel_sets():
    op = make_gradient_operator(1, 2)
    prob = DenoiseProblem(np.array([[0.0, 1.0]]), [(op, np.array([0.25, 0.25]))])
    sol = solve_tv(prob, tol=1e-12)
    part = classify(sol.u, sol.q, prob.alphas[0], op)
    # row 0 carries the jump, row 1 is the Neumann boundary row
    assert labels(part) == ["inactive", "strongly_active"]
    prob = prob.with_alphas([np.array([0.5, 0.5])])
    sol = solve_tv(prob, tol=1e-12)
    assert labels(classify(sol.u, sol.q, prob.alphas[0], op)) == ["biactive", "strongly_active"]
    prob = prob.with_alphas([np.array([0.0, 0.0])])
    sol = solve_tv(prob, tol=1e-12)
    assert labels(classify(sol.u, sol.q, prob.alphas[0], op)) == ["zero_inactive", "triactive"]


@pytest.mark.parametrize("seed", range(5))
def test_matches_hand_classification(seed):
    rng = np.random.default_rng(seed)
    _, f = blocky(rng, (8, 8))
    op = make_gradient_operator(8, 8)
    alpha = rng.choice([0.0, 0.03, 0.1], size=64)
    sol = solve_tv(DenoiseProblem(f, [(op, alpha)]), tol=1e-11)
    part = classify(sol.u, sol.q, alpha, op, eps_x=1e-7, eps_a=1e-7)
    part.check()
    assert labels(part) == hand_partition(sol.u, sol.q, alpha, op, 1e-7)


def test_scaling_invariance(rng):
    # S(c f, c alpha) = c S(f, alpha) with duals scaled by c
    _, f = blocky(rng, (8, 8))
    op = make_gradient_operator(8, 8)
    alpha = rng.uniform(0.01, 0.1, 64)
    sol = solve_tv(DenoiseProblem(f, [(op, alpha)]), tol=1e-11)
    base = classify(sol.u, sol.q, alpha, op, eps_x=1e-7, eps_a=1e-7)
    for c in (0.5, 3.0):
        scaled = classify(c * sol.u, c * sol.q, c * alpha, op, eps_x=c * 1e-7, eps_a=c * 1e-7)
        assert labels(scaled) == labels(base)


@given(seed=st.integers(0, 2**31))
def test_partition_is_exhaustive(seed):
    rng = np.random.default_rng(seed)
    op = make_gradient_operator(3, 4)
    u = rng.choice([0.0, 1.0], size=12) * rng.random(12)
    alpha = rng.choice([0.0, 0.2], size=12)
    q = rng.standard_normal((12, 2))
    q *= (alpha * rng.choice([0.5, 1.0], size=12) / np.maximum(row_norms(q), 1e-300))[:, None]
    part = classify(u, q, alpha, op)
    part.check()
    assert sum(part.counts().values()) == 12


def test_stable_under_small_dual_perturbation(rng):
    _, f = blocky(rng, (8, 8))
    op = make_gradient_operator(8, 8)
    alpha = np.full(64, 0.05)
    sol = solve_tv(DenoiseProblem(f, [(op, alpha)]), tol=1e-11)
    part = classify(sol.u, sol.q, alpha, op)
    q = sol.q + 1e-9 * rng.standard_normal(sol.q.shape)
    assert labels(classify(sol.u, q, alpha, op)) == labels(part)


def test_infeasible_dual_raises():
    op = make_gradient_operator(1, 2)
    with pytest.raises(InfeasibleDual):
        classify(np.zeros(2), np.array([[0.2, 0.0], [0.0, 0.0]]), np.array([0.1, 0.1]), op)


def test_b2_split():
    op = make_gradient_operator(1, 2)
    prob = DenoiseProblem(np.array([[0.0, 1.0]]), [(op, np.array([0.5, 0.5]))])
    sol = solve_tv(prob, tol=1e-12)
    part = classify(sol.u, sol.q, prob.alphas[0], op, b2=np.array([True, True]))
    assert part.b2.tolist() == [True, False]
    assert not part.b1.any()
    part.check()


def test_cone_membership_examples():
    op = make_gradient_operator(1, 2)
    prob = DenoiseProblem(np.array([[0.0, 1.0]]), [(op, np.array([0.5, 0.5]))])
    sol = solve_tv(prob, tol=1e-12)
    part = classify(sol.u, sol.q, prob.alphas[0], op)
    # q_0 = (1/2, 0): only directions with (Kv)_0 >= 0 are in the cone
    np.testing.assert_allclose(sol.q[0], [0.5, 0.0], atol=1e-9)
    assert cone_membership(np.array([0.0, 0.0]), part, sol.q, prob.alphas[0], op)
    assert cone_membership(np.array([1.0, 1.0]), part, sol.q, prob.alphas[0], op)
    assert cone_membership(np.array([-1.0, 1.0]), part, sol.q, prob.alphas[0], op)
    assert not cone_membership(np.array([1.0, -1.0]), part, sol.q, prob.alphas[0], op)


# ---------------------------------------------------------------------------
# sensitivity


def generic_point(seed, shape=(6, 6)):
    rng = np.random.default_rng(seed)
    _, f = blocky(rng, shape, sigma=0.05)
    op = make_gradient_operator(*shape)
    alpha = rng.uniform(0.01, 0.06, op.n)
    prob = DenoiseProblem(f, [(op, alpha)])
    sol = solve_tv(prob, tol=1e-12, max_iter=400000)
    part = classify(sol.u, sol.q, alpha, op)
    return rng, prob, sol, op, alpha, part


@pytest.mark.parametrize("seed", range(4))
def test_sensitivity_matches_finite_differences(seed):
    rng, prob, sol, op, alpha, part = generic_point(seed)
    if part.biactive.any():
        pytest.skip("degenerate draw")
    h = rng.standard_normal(op.n)
    eta = solve_sensitivity_system(sol.u, sol.q, alpha, h, part, op=op)
    _, fd = directional_derivative_fd(alpha, h, prob, t_list=(1e-6, 5e-7), base=sol)
    assert np.linalg.norm(eta - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_sensitivity_linear_and_zero(rng):
    _, prob, sol, op, alpha, part = generic_point(11)
    h1, h2 = rng.standard_normal((2, op.n))
    e1 = solve_sensitivity_system(sol.u, sol.q, alpha, h1, part, op=op)
    e2 = solve_sensitivity_system(sol.u, sol.q, alpha, h2, part, op=op)
    e12 = solve_sensitivity_system(sol.u, sol.q, alpha, 2 * h1 - h2, part, op=op)
    np.testing.assert_allclose(e12, 2 * e1 - e2, atol=1e-12)
    e0 = solve_sensitivity_system(sol.u, sol.q, alpha, np.zeros(op.n), part, op=op)
    assert np.all(e0 == 0)
    assert cone_membership(e1, part, sol.q, alpha, op, tol=1e-9)


def test_sensitivity_requires_positive_alpha():
    op = make_gradient_operator(1, 2)
    prob = DenoiseProblem(np.array([[0.0, 1.0]]), [(op, np.zeros(2))])
    sol = solve_tv(prob)
    part = classify(sol.u, sol.q, np.zeros(2), op)
    with pytest.raises(AssumptionViolated):
        solve_sensitivity_system(sol.u, sol.q, np.zeros(2), np.ones(2), part, op=op)


def test_kink_is_one_sided():
    # at alpha = 1/2 the two-pixel solution map has a kink
    op = make_gradient_operator(1, 2)
    prob = DenoiseProblem(np.array([[0.0, 1.0]]), [(op, np.array([0.5, 0.5]))])
    up = directional_derivative_fd(np.array([0.5, 0.5]), np.array([1.0, 1.0]), prob)[1]
    down = directional_derivative_fd(np.array([0.5, 0.5]), np.array([-1.0, -1.0]), prob)[1]
    np.testing.assert_allclose(up, [0.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(down, [-1.0, 1.0], atol=1e-6)


def test_fd_rejects_infeasible_direction():
    op = make_gradient_operator(1, 2)
    prob = DenoiseProblem(np.array([[0.0, 1.0]]), [(op, np.zeros(2))])
    with pytest.raises(AssumptionViolated):
        directional_derivative_fd(np.zeros(2), -np.ones(2), prob)


# ---------------------------------------------------------------------------
# M-stationarity


def two_pixel_candidate(alpha):
    pair = two_pixel_dataset().pairs[0]
    prob = DenoiseProblem.single(pair.noisy, alpha)
    sol = solve_tv(prob, tol=1e-12)
    from tvbilevel.params import ParamField
    return prob, sol, sol.u - pair.clean.ravel(), [ParamField.scalar((1, 2), alpha)]


def test_two_pixel_optimum_is_stationary():
    prob, sol, gj, params = two_pixel_candidate(0.25)
    cert = check_m_stationarity(prob, sol, gj, params=params)
    assert cert.stationary, cert.report()
    assert cert.max_residual() <= 1e-6
    assert cert.report().splitlines()[0].startswith("status stationary")


@pytest.mark.parametrize("alpha", [0.2, 0.26, 0.4])
def test_off_optimum_is_not_stationary(alpha):
    prob, sol, gj, params = two_pixel_candidate(alpha)
    cert = check_m_stationarity(prob, sol, gj, params=params)
    assert not cert.stationary
    assert cert.residuals["parameter_complementarity"] > 1e-3


def test_zero_loss_gradient_gives_zero_multipliers(rng):
    _, f = blocky(rng, (6, 6))
    prob = DenoiseProblem.single(f, rng.uniform(0.01, 0.05, 36))
    sol = solve_tv(prob, tol=1e-12, max_iter=400000)
    cert = check_m_stationarity(prob, sol, np.zeros(36))
    assert cert.stationary
    assert np.abs(cert.p[0]).max() <= 1e-12
    assert np.abs(cert.rho).max() <= 1e-12
