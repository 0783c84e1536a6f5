import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from connav.cpo import (DegenerateGeometry, Learner, SurrogateProblem, SurrogateTerms, TrustRegionConfig,
                        compute_step, conjugate_gradient, line_search)
from connav.env import EnvConfig, NavEnv
from connav.expert import ScriptedExpert
from connav.net import FisherOperator, PolicyNet, ValueNet, avg_kl, log_prob
from connav.rl import Batch, bc_loss
from connav.train import collect_batch
from connav.world import ScenarioConfig, generate_scenario

from conftest import SMALL, random_obs
from cpo_oracle import grid_optimum, random_instance
from gradcheck import fd_grad, rel_err


def mat(H):
    H = np.asarray(H, dtype=float)
    return lambda v: H @ v


def test_cg_examples():
    np.testing.assert_allclose(conjugate_gradient(mat(np.eye(3)), [1.0, 2.0, 3.0], iters=1), [1, 2, 3])
    np.testing.assert_allclose(conjugate_gradient(mat(np.diag([2.0, 4.0])), [2.0, 4.0]), [1, 1])


def test_cg_random_spd_residual():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = rng.standard_normal((50, 50))
        H = m @ m.T / 50 + np.eye(50)
        rhs = rng.standard_normal(50)
        x = conjugate_gradient(mat(H), rhs, iters=200, tol=1e-12)
        assert np.linalg.norm(H @ x - rhs) <= 1e-8
        np.testing.assert_allclose(x, np.linalg.solve(H, rhs), atol=1e-8)


def test_trpo_step_closed_form():
    x, info = compute_step(SurrogateProblem(np.array([1.0, 0.0]), None, -1.0, 0.005, mat(np.eye(2))))
    np.testing.assert_allclose(x, [0.1, 0.0])
    assert info.mode == "trpo"


def test_zero_cost_gradient_equals_trpo():
    g = np.array([0.3, -0.4])
    a, _ = compute_step(SurrogateProblem(g, None, -1.0, 0.01, mat(np.eye(2))))
    b, _ = compute_step(SurrogateProblem(g, np.zeros(2), -1.0, 0.01, mat(np.eye(2))))
    np.testing.assert_array_equal(a, b)


def test_recovery_closed_form():
    x, info = compute_step(SurrogateProblem(np.array([0.0, 1.0]), np.array([1.0, 0.0]), 1.0, 0.5, mat(np.eye(2))))
    np.testing.assert_allclose(x, [-1.0, 0.0])
    assert info.mode == "recovery"


def test_degenerate_geometry():
    with pytest.raises(DegenerateGeometry):
        compute_step(SurrogateProblem(np.zeros(2), None, -1.0, 0.01, mat(np.eye(2))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_compute_step_matches_grid_search(seed):
    H, g, b, c, delta = random_instance(np.random.default_rng(seed))
    x, info = compute_step(SurrogateProblem(g, b, c, delta, mat(H)))
    best, _ = grid_optimum(H, g, b, c, delta, n=20_000)
    if best is None:
        assert info.mode == "recovery" and b @ x < 0
    else:
        assert 0.5 * x @ H @ x <= delta * (1 + 1e-8)
        assert b @ x + c <= 1e-8
        assert g @ x >= best - 1e-3


# ---------------------------------------------------------------- surrogates

def synthetic_batch(policy, theta, rng, n=32, expert=True):
    obs = random_obs(rng, n)
    mean = policy.mean(theta, obs)
    ls = policy.logstd(theta)
    act = mean + np.exp(ls) * rng.standard_normal(mean.shape)
    term = np.ones(n, dtype=bool)
    return Batch(obs=obs, next_obs=obs, actions=act, logp=log_prob(mean, ls, act), rewards=act[:, 0].copy(),
                 costs=np.zeros(n), terminal=term, episodes=[(k, k + 1) for k in range(n)],
                 expert_actions=rng.uniform(-0.7, 0.7, (n, 2)) if expert else None)


@pytest.mark.parametrize("seed", range(3))
def test_surrogate_gradients_match_fd(small_policy, seed):
    rng = np.random.default_rng(seed)
    t0 = small_policy.init_params(rng)
    batch = synthetic_batch(small_policy, t0, rng)
    terms = SurrogateTerms(small_policy, t0, batch, rng.standard_normal(32), rng.standard_normal(32),
                           0.2, 0.999, 0.1)
    t = t0 + 0.05 * rng.standard_normal(t0.size)
    assert rel_err(terms.objective_grad(t), fd_grad(terms.objective, t)) < 1e-4
    assert rel_err(terms.cost_grad(t), fd_grad(terms.cost, t)) < 1e-4


def test_surrogate_gradient_bc_linearity(small_policy):
    rng = np.random.default_rng(0)
    t = small_policy.init_params(rng)
    batch = synthetic_batch(small_policy, t, rng)
    adv = rng.standard_normal(32)
    g0 = SurrogateTerms(small_policy, t, batch, adv, adv, 0.0, 0.999, 0.0).objective_grad(t)
    g1 = SurrogateTerms(small_policy, t, batch, adv, adv, 0.0, 0.999, 0.1).objective_grad(t)
    np.testing.assert_allclose(g0 - g1, 0.1 * bc_loss(small_policy, t, batch.obs, batch.expert_actions)[1],
                               atol=1e-12)
    assert not SurrogateTerms(small_policy, t, batch, np.zeros(32), adv, 0.0, 0.999, 0.0).objective_grad(t).any()


def line_search_fixture(small_policy):
    rng = np.random.default_rng(5)
    t = small_policy.init_params(rng)
    batch = synthetic_batch(small_policy, t, rng, n=64)
    terms = SurrogateTerms(small_policy, t, batch, rng.standard_normal(64), np.zeros(64), 0.0, 0.999, 0.0)
    cfg = TrustRegionConfig()
    fvp = FisherOperator(small_policy, t, batch.obs, cfg.damping)
    x, info = compute_step(SurrogateProblem(terms.objective_grad(t), None, -cfg.cost_limit, cfg.max_kl, fvp))
    return t, terms, cfg, x, info


def test_line_search_accepts_full_small_step(small_policy):
    t, terms, cfg, x, info = line_search_fixture(small_policy)
    # a quarter of the trust-region step: quadratic model is accurate there
    new, diag = line_search(small_policy, t, 0.25 * x, terms, info, cfg)
    assert diag.accepted and diag.backtracks == 0
    assert diag.improvement >= 0 and diag.kl <= cfg.max_kl


def test_line_search_huge_step_never_violates_kl(small_policy):
    t, terms, cfg, x, info = line_search_fixture(small_policy)
    new, diag = line_search(small_policy, t, 100 * x, terms, info, cfg)
    if diag.accepted:
        assert diag.backtracks > 0
        assert avg_kl(small_policy, t, new, terms.obs) <= cfg.max_kl
    else:
        assert np.array_equal(new, t)


def test_line_search_all_fail_leaves_params(small_policy):
    t, terms, cfg, x, info = line_search_fixture(small_policy)
    new, diag = line_search(small_policy, t, -x, terms, info, cfg)
    assert not diag.accepted and np.array_equal(new, t)


# ------------------------------------------------------------------ updates

def small_learner(seed=0):
    p, v = PolicyNet(SMALL), ValueNet(SMALL)
    rng = np.random.default_rng(seed)
    return Learner(p, v, p.init_params(rng), v.init_params(rng), v.init_params(rng, zero_head=True))


def test_trpo_improves_bandit_return():
    learner = small_learner()
    rng = np.random.default_rng(1)
    probe = random_obs(np.random.default_rng(2), 256)
    cfg = TrustRegionConfig()
    start = learner.policy.mean(learner.theta, probe)[:, 0].mean()
    for _ in range(20):
        batch = synthetic_batch(learner.policy, learner.theta, rng, n=256, expert=False)
        d = learner.update(batch, cfg, mode="trpo", bc=False)
        assert not d["accepted"] or d["kl"] <= 1.5 * cfg.max_kl
    # reward is the x-velocity, so the mean action should drift right
    assert learner.policy.mean(learner.theta, probe)[:, 0].mean() > start + 0.1


def real_batch(learner, seed, steps=150):
    rng = np.random.default_rng(seed)
    envs = [NavEnv(generate_scenario(ScenarioConfig(n_robots=3, goal_radius=1.0), rng), EnvConfig(max_steps=40))
            for _ in range(3)]
    return collect_batch(learner.policy, learner.theta, envs, rng, steps, ScriptedExpert())


def test_cpo_with_infinite_limit_matches_trpo():
    a, b = small_learner(), small_learner()
    batch = real_batch(a, 0)
    batch.costs[::3] = 1.0
    a.update(batch, TrustRegionConfig(cost_limit=math.inf), mode="cpo", bc=True)
    b.update(batch, TrustRegionConfig(cost_limit=math.inf), mode="trpo", bc=True)
    np.testing.assert_allclose(a.theta, b.theta, rtol=0, atol=1e-12)


def test_cost_free_cpo_equals_trpo_sequence():
    a, b = small_learner(), small_learner()
    for k in range(3):
        batch = real_batch(a, k)
        batch.costs[:] = 0.0
        a.update(batch, TrustRegionConfig(), mode="cpo", bc=True)
        b.update(batch, TrustRegionConfig(), mode="trpo", bc=True)
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.phi, b.phi)


def test_update_diagnostics_fields():
    learner = small_learner()
    d = learner.update(real_batch(learner, 0), TrustRegionConfig(), mode="cpo", bc=True)
    for key in ("avg_return", "J_c", "bc_loss", "kl", "steps"):
        assert key in d
    assert not d["accepted"] or d["kl"] <= 1.5 * 0.01
    with pytest.raises(ValueError):
        learner.update(real_batch(learner, 0), TrustRegionConfig(), mode="ppo")
