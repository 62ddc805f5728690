from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedelastic import diagnostics as dg
from fedelastic import local, model
from fedelastic.errors import ConfigurationError, DivergedSolveError
from fedelastic.local import LocalProblem, SolveBudget
from fedelastic.model import Dataset, ModelSpec
from fedelastic.seeding import stream

LIN1 = ModelSpec("linear", 1)
# L(theta) = 1/2 (theta - 3)^2
QUAD = Dataset(np.array([[1.0]]), np.array([3.0]))
AMPLE = SolveBudget(epochs=2000, batch_size=1, lr=0.1)


def _p(**kw):
    kw.setdefault("anchor", np.zeros(1))
    return LocalProblem(LIN1, QUAD, **kw)


def test_objective_at_anchor_is_plain_loss():
    prob = _p(anchor=np.array([2.0]), lambda1=0.7, lambda2=3.0)
    assert local.local_objective(prob, np.array([2.0])) == 0.5


def test_objective_without_penalties_is_loss():
    prob = _p()
    assert local.local_objective(prob, np.array([1.0])) == 2.0


def test_objective_arithmetic():
    prob = _p(lambda1=0.5, lambda2=1.0)
    assert local.local_objective(prob, np.array([1.0])) == 3.0


def test_feddyn_objective_subtracts_linear_term():
    prob = _p(lambda2=1.0, cache=np.array([0.5]))
    # 2 + 0.5 - 0.5*1
    assert local.local_objective(prob, np.array([1.0])) == 2.0
    assert local.local_objective(prob, np.array([1.0]), shifted=True) == 2.0


def test_ridge_closed_form():
    th = local.solve_local(_p(lambda2=1.0), AMPLE, stream(0, "local"))
    assert th[0] == pytest.approx(1.5, abs=1e-3)


def test_elastic_net_closed_form():
    th = local.solve_local(_p(lambda1=0.5, lambda2=1.0), AMPLE, stream(0, "local"))
    assert th[0] == pytest.approx(1.25, abs=1e-3)


def test_prox_inner_closed_form():
    b = SolveBudget(epochs=2000, batch_size=1, lr=0.1, inner="prox")
    assert local.solve_local(_p(lambda1=0.5, lambda2=1.0), b, stream(0, "local"))[0] == pytest.approx(1.25, abs=1e-3)
    # penalty large enough that the minimiser stays at the anchor: |grad| = 3 <= lambda1
    assert local.solve_local(_p(lambda1=3.5, lambda2=1.0), b, stream(0, "local"))[0] == 0.0


def test_unpenalised_solve_is_plain_sgd(blobs):
    spec = ModelSpec("logistic", blobs.input_dim, 4)
    anchor = np.random.default_rng(0).normal(size=spec.num_params)
    budget = SolveBudget(epochs=2, batch_size=16, lr=0.05)
    got = local.solve_local(LocalProblem(spec, blobs, anchor), budget, stream(1, "local", 3, 4))
    rng = stream(1, "local", 3, 4)
    theta = anchor.copy()
    for _ in range(2):
        perm = rng.permutation(len(blobs))
        for j in range(0, len(blobs), 16):
            idx = perm[j:j + 16]
            theta -= 0.05 * model.grad(spec, theta, (blobs.features[idx], blobs.labels[idx]))
    assert np.array_equal(got, theta)


def test_divergence_names_step_size():
    with pytest.raises(DivergedSolveError, match="eta_l=3.0") as info:
        local.solve_local(_p(lambda2=1.0), SolveBudget(epochs=5, batch_size=1, lr=3.0), stream(0, "local"))
    assert info.value.lr == 3.0


def test_scaffold_single_plain_step(blobs):
    spec = ModelSpec("logistic", blobs.input_dim, 4)
    d = spec.num_params
    anchor = np.random.default_rng(1).normal(size=d) * 0.1
    prob = LocalProblem(spec, blobs, anchor, c_local=np.zeros(d), c_global=np.zeros(d))
    budget = SolveBudget(batch_size=8, lr=0.1, steps=1)
    th, c_new = local.scaffold_local_pass(prob, budget, stream(0, "local"))
    idx = stream(0, "local").permutation(len(blobs))[:8]
    g = model.grad(spec, anchor, (blobs.features[idx], blobs.labels[idx]))
    assert np.allclose(th, anchor - 0.1 * g, rtol=0, atol=1e-15)
    assert np.allclose(c_new, g, rtol=1e-12, atol=1e-14)


def test_scaffold_hand_computed_steps():
    prob = _p(lambda1=0.5, lambda2=1.0, c_local=np.array([0.2]), c_global=np.array([0.5]))
    th, c = local.scaffold_local_pass(prob, SolveBudget(batch_size=1, lr=0.1, steps=1), stream(0, "local"))
    # grad at 0 is -3; displacement 0 so penalties vanish: g = -3 - 0.2 + 0.5
    assert th[0] == pytest.approx(0.27, abs=1e-15)
    assert c[0] == pytest.approx(0.2 - 0.5 - 0.27 / 0.1, abs=1e-12)
    th, c = local.scaffold_local_pass(prob, SolveBudget(batch_size=1, lr=0.1, steps=2), stream(0, "local"))
    # second step at 0.27: g = -2.73 + 0.3 + 0.27 + 0.5 = -1.66
    assert th[0] == pytest.approx(0.436, abs=1e-14)
    assert c[0] == pytest.approx(0.2 - 0.5 - 0.436 / 0.2, abs=1e-12)


def test_scaffold_needs_control_variates():
    with pytest.raises(ConfigurationError):
        local.scaffold_local_pass(_p(), SolveBudget(), stream(0, "local"))
    with pytest.raises(ConfigurationError):
        _p(c_local=np.zeros(1))


def test_cache_update_examples():
    cache = np.array([1.0, -1.0])
    anchor = np.zeros(2)
    out = local.feddyn_grad_cache_update(cache, np.array([0.5, -0.5]), anchor, 0.01, 0.1)
    assert np.allclose(out, [0.94, -0.94], rtol=0, atol=1e-15)
    assert np.array_equal(local.feddyn_grad_cache_update(cache, anchor, anchor, 0.3, 0.2), cache)
    ref = cache - 0.1 * np.array([0.5, -0.5])
    assert np.array_equal(local.feddyn_grad_cache_update(cache, np.array([0.5, -0.5]), anchor, 0.0, 0.1), ref)


def test_residual_small_at_closed_form():
    prob = _p(lambda1=0.5, lambda2=1.0, cache=np.array([0.0]))
    assert abs(local.first_order_residual(prob, np.array([1.25]))[0]) <= 1e-6
    th = local.solve_local(prob, AMPLE, stream(0, "local"))
    assert abs(local.first_order_residual(prob, th)[0]) <= 1e-6


def test_residual_zero_at_unconstrained_minimum():
    assert local.first_order_residual(_p(), np.array([3.0]))[0] == 0.0


def test_residual_kink_convention():
    prob = _p(lambda1=3.5, lambda2=1.0)
    assert local.first_order_residual(prob, np.zeros(1))[0] == 0.0
    prob = _p(lambda1=2.0, lambda2=1.0)
    assert local.first_order_residual(prob, np.zeros(1))[0] == pytest.approx(1.0)


def _convex_clients():
    base = model.make_synthetic(3, 6, 300, 2.0, seed=2)
    binary = Dataset(base.features, (base.labels > 0).astype(int), 2)
    return [(ModelSpec("logistic", 6, 2), binary), (ModelSpec("logistic", 6, 3), base)]


@pytest.mark.parametrize("which", [0, 1])
@pytest.mark.parametrize("lambda1", [1e-4, 1e-3])
def test_convex_residual_after_budget(which, lambda1):
    spec, data = _convex_clients()[which]
    rng = np.random.default_rng(0)
    anchor = rng.normal(scale=0.3, size=spec.num_params)
    cache = rng.normal(scale=0.05, size=spec.num_params)
    prob = LocalProblem(spec, data, anchor, lambda1, 0.1, cache=cache)
    th = local.solve_local(prob, dg.convex_budget(spec, data, 0.1), stream(0, "local"))
    assert np.abs(local.first_order_residual(prob, th)).max() <= 1e-4
    # away from the kink the condition reads |grad - cache + lambda2 d| = lambda1
    d = th - anchor
    g = model.grad(spec, th, data) - cache + 0.1 * d
    assert np.allclose(np.abs(g[d != 0]), lambda1, atol=1e-4)


def _kink_problem():
    spec, data = _convex_clients()[0]
    rng = np.random.default_rng(0)
    anchor = rng.normal(scale=0.3, size=spec.num_params)
    cache = rng.normal(scale=0.05, size=spec.num_params)
    return spec, data, LocalProblem(spec, data, anchor, 1e-2, 0.1, cache=cache)


def test_subgradient_oscillates_at_active_kink():
    # Known limitation: a coordinate whose minimiser sits on the kink is never
    # hit exactly, so its residual stays near lambda1 - |g_i| at any budget.
    spec, data, prob = _kink_problem()
    th = local.solve_local(prob, dg.convex_budget(spec, data, 0.1), stream(0, "local"))
    r = np.abs(local.first_order_residual(prob, th))
    assert r.max() > 1e-4
    assert np.all(th != prob.anchor)
    exact = local.solve_local(prob, dg.convex_budget(spec, data, 0.1, inner="prox"), stream(0, "local"))
    assert np.flatnonzero(exact == prob.anchor).tolist() == [int(np.argmax(r))]


def test_prox_handles_active_kinks():
    spec, data, prob = _kink_problem()
    th = local.solve_local(prob, dg.convex_budget(spec, data, 0.1, inner="prox"), stream(0, "local"))
    assert np.any(th == prob.anchor)
    assert np.abs(local.first_order_residual(prob, th)).max() <= 1e-4


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5, allow_nan=False), st.floats(0, 5, allow_nan=False))
def test_soft_threshold_minimises_prox_objective(v, tau):
    x = local.soft_threshold(v, tau)
    span = max(2 * abs(v), 1e-3)
    grid = np.arange(-span, span + 1e-4, 1e-4)
    obj = 0.5 * (grid - v) ** 2 + tau * np.abs(grid)
    best = grid[np.argmin(obj)]
    assert abs(float(x) - best) <= 1e-4 + 1e-12


@pytest.mark.parametrize("n, bs, count, sizes", [(951, 10, 96, {9, 10}), (400, 16, 25, {16}),
                                                 (5, 10, 1, {5}), (11, 10, 2, {5, 6})])
def test_epoch_batches_are_balanced(n, bs, count, sizes):
    batches = local.epoch_batches(np.random.default_rng(0), n, bs)
    assert len(batches) == count == SolveBudget(batch_size=bs).total_steps(n)
    assert {len(b) for b in batches} == sizes
    assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(n))


def test_budget_validation():
    for kw in (dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(steps=0), dict(inner="adam")):
        with pytest.raises(ConfigurationError):
            SolveBudget(**kw)
    assert SolveBudget(epochs=2, batch_size=10).total_steps(25) == 6
    assert SolveBudget(steps=4).total_steps(25) == 4
