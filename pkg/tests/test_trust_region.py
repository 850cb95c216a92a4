import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import brentq

from tvbilevel.data import TrainingPair, two_pixel_dataset
from tvbilevel.exceptions import InvalidParam, MaxIterations
from tvbilevel.gradient import Evaluator, SolverOptions
from tvbilevel.params import ParamField
from tvbilevel.trust_region import (BOULIGAND, REGULARIZED, TRACE_COLUMNS, LBFGSMemory, TRConfig,
                                    dogleg_step, lbfgs_apply, lbfgs_model_hvp, lbfgs_update,
                                    model_value, quality_ratio, run, trace_to_csv)


class FixedModel:
    """Explicit SPD model matrix with the memory interface."""

    def __init__(self, mat):
        self.mat = np.asarray(mat, float)

    def apply(self, v):
        return self.mat @ v

    def apply_inverse(self, v):
        return np.linalg.solve(self.mat, v)

    def dense(self, p):
        return self.mat


def random_memory(rng, p, k=5):
    mem = LBFGSMemory(10)
    A = rng.standard_normal((p, p))
    A = A @ A.T + p * np.eye(p)
    for _ in range(k):
        s = rng.standard_normal(p)
        lbfgs_update(mem, s, A @ s)
    return mem


def test_config_validation():
    TRConfig()
    for bad in (dict(eta1=0.8, eta2=0.5), dict(gamma1=0.0), dict(gamma2=1.0), dict(tol=0.0),
                dict(delta_t=2.0), dict(max_iter=0), dict(huber_gamma=-1.0),
                dict(grow_factor=0.5), dict(delta0=1e4)):
        with pytest.raises(InvalidParam):
            TRConfig(**bad)


def test_lbfgs_empty_and_unit_pair():
    mem = LBFGSMemory(3)
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(lbfgs_apply(mem, v), v)
    np.testing.assert_array_equal(lbfgs_model_hvp(mem, v), v)
    e1 = np.eye(3)[0]
    lbfgs_update(mem, e1, e1)
    np.testing.assert_allclose(lbfgs_model_hvp(mem, e1), e1, atol=1e-15)
    np.testing.assert_allclose(lbfgs_apply(mem, e1), e1, atol=1e-15)


def test_lbfgs_inverse_consistency(rng):
    mem = random_memory(rng, 7)
    assert len(mem) == 5
    for _ in range(5):
        v = rng.standard_normal(7)
        np.testing.assert_allclose(lbfgs_apply(mem, lbfgs_model_hvp(mem, v)), v, atol=1e-8)
    B = mem.dense(7)
    np.testing.assert_allclose(B, B.T, atol=1e-10)
    assert np.linalg.eigvalsh(B).min() > 0


def test_lbfgs_secant_and_safeguard(rng):
    mem = random_memory(rng, 6, k=3)
    s, y = mem.s[-1], mem.y[-1]
    np.testing.assert_allclose(mem.apply(s), y, atol=1e-9)
    assert not mem.update(np.eye(6)[0], -np.eye(6)[0])
    assert len(mem) == 3
    for _ in range(12):
        mem.update(rng.standard_normal(6) + 10, rng.standard_normal(6) + 10)
    assert len(mem) <= 10


def test_dogleg_newton_case():
    s = dogleg_step(np.array([-0.1, 0.0]), LBFGSMemory(), 1.0, np.array([1.0, 1.0]))
    np.testing.assert_allclose(s, [0.1, 0.0])


def test_dogleg_clamped_by_positivity():
    s = dogleg_step(np.array([10.0, 0.0]), LBFGSMemory(), 1.0, np.array([0.05, 1.0]))
    np.testing.assert_allclose(s, [-0.05, 0.0], atol=1e-15)


def test_dogleg_segment_hits_box():
    B = FixedModel(np.diag([1.0, 100.0]))
    g = np.array([1.0, 1.0])
    s, info = dogleg_step(g, B, 0.5, np.array([10.0, 10.0]), return_info=True)
    assert info.case == "dogleg"
    s_n = np.array([-1.0, -0.01])
    s_c = -(2.0 / 101.0) * g
    # brute force: root of the first coordinate reaching -0.5 along the segment
    tau = brentq(lambda t: (s_c + t * (s_n - s_c))[0] + 0.5, 0.0, 1.0, xtol=1e-15)
    np.testing.assert_allclose(s, s_c + tau * (s_n - s_c), atol=1e-12)
    assert np.max(np.abs(s)) == pytest.approx(0.5)


@given(seed=st.integers(0, 2**31), delta=st.floats(1e-3, 10.0))
def test_dogleg_feasible_with_cauchy_decrease(seed, delta):
    rng = np.random.default_rng(seed)
    p = 6
    mem = random_memory(rng, p)
    g = rng.standard_normal(p)
    alpha = rng.uniform(0.0, 2.0, p) * rng.choice([0.0, 1.0], p, p=[0.2, 0.8])
    s = dogleg_step(g, mem, delta, alpha)
    assert np.all(alpha + s >= 0) and np.max(np.abs(s)) <= delta * (1 + 1e-12)
    dec = -model_value(g, mem, s)
    # largest feasible step length along -g
    d = -g / np.linalg.norm(g)
    lo = np.maximum(-alpha, -delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d > 0, delta / d, np.where(d < 0, lo / d, np.inf))
    d_eff = float(np.min(t))
    lam = np.linalg.eigvalsh(mem.dense(p)).max()
    bound = 0.5 * np.linalg.norm(g) * min(d_eff, np.linalg.norm(g) / lam)
    assert dec >= bound * (1 - 1e-9) - 1e-15
    if bound > 0:
        assert dec > 0


def test_quality_ratio_examples():
    # exact quadratic: model and cost agree
    assert quality_ratio(2.0, 1.5, 2.0, 1.5) == 1.0
    assert quality_ratio(1.0, 1.2, 1.0, 0.5) < 0
    assert quality_ratio(1.0, 0.9, 1.0, 1.0 - 1e-20) == -math.inf


def test_run_at_global_minimum():
    clean = np.linspace(0, 1, 12).reshape(3, 4)
    ev = Evaluator([TrainingPair(clean, clean)])
    res = run(ev, ParamField.scalar((3, 4), 0.0))
    assert res.cost == 0.0
    assert not res.accepted_costs
    assert res.trace[-1].delta <= TRConfig().tol * 4


def test_run_two_pixel_oracle():
    grid = np.linspace(0, 1, 100001)
    oracle = grid[np.argmin(np.where(grid < 0.5, (grid - 0.25) ** 2, 0.0625))]
    ev = Evaluator(two_pixel_dataset(), options=SolverOptions(tol=1e-12))
    seen = []
    res = run(ev, ParamField.scalar((1, 2), 0.01), callback=seen.append)
    assert abs(res.alpha[0].dofs[0] - oracle) <= 1e-3
    costs = res.accepted_costs
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert len(seen) == len(res.trace) == res.iterations
    for rec in res.trace:
        if rec.delta < TRConfig().delta_t:
            assert rec.phase == REGULARIZED
        else:
            assert rec.phase == BOULIGAND


def test_run_patch_feasible_and_monotone():
    rng = np.random.default_rng(3)
    clean = np.kron(rng.random((2, 2)), np.ones((4, 4)))
    noisy = clean + 0.05 * rng.standard_normal(clean.shape)
    ev = Evaluator([TrainingPair(clean, noisy)])
    alphas = []

    orig = ev.evaluate

    def spy(alpha, gamma=None):
        out = orig(alpha, gamma)
        alphas.extend(np.concatenate([f.dofs for f in out.params]))
        return out
    ev.evaluate = spy
    res = run(ev, ParamField.patch((8, 8), 2, 2, 0.01), TRConfig(delta0=0.05, tol=1e-5))
    assert min(alphas) >= 0
    costs = res.accepted_costs
    assert costs and all(b <= a for a, b in zip(costs, costs[1:]))
    assert res.cost <= ev.cost(ParamField.patch((8, 8), 2, 2, 0.01))


def test_max_iterations_carries_trace():
    ev = Evaluator(two_pixel_dataset())
    with pytest.raises(MaxIterations) as info:
        run(ev, 0.01, TRConfig(max_iter=2))
    assert len(info.value.trace) == 2
    assert info.value.result.iterations == 2


def test_trace_csv():
    ev = Evaluator(two_pixel_dataset())
    res = run(ev, 0.01, TRConfig(tol=1e-4))
    lines = trace_to_csv(res.trace).splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == len(res.trace) + 1
    assert float(lines[1].split(",")[2]) == res.trace[0].cost
