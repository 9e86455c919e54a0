"""Exact tabular solvers against closed forms, cross-oracles, and duality."""

import numpy as np
import pytest

from safelab.envs import GridCircleWorld
from safelab.oracle import (
    ConstrainedSolution,
    InfeasibleCmdpError,
    NonContractiveError,
    TabularCmdp,
    constrained_optimum,
    deterministic_policy_matrix,
    evaluate_deterministic_policies,
    lagrangian_vi,
    load_tabular,
    policy_eval_exact,
    policy_value,
    save_tabular,
)


def random_cmdp(rng, n_states=10, n_actions=3, gamma=0.9, c_th=1.0):
    p = rng.uniform(size=(n_states, n_actions, n_states))
    p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(size=(n_states, n_actions))
    c = rng.uniform(size=(n_states, n_actions))
    eta = rng.uniform(size=n_states)
    eta /= eta.sum()
    return TabularCmdp(p, r, c, gamma, c_th, eta)


def bandit():
    p = np.zeros((1, 2, 1))
    p[:, :, 0] = 1.0
    return TabularCmdp(p, np.array([[1.0, 0.0]]), np.array([[2.0, 0.0]]), 0.0, 1.0, np.array([1.0]))


def test_validation_rejects_bad_tensors():
    p = np.zeros((2, 2, 2))
    p[:, :, 0] = 0.7  # rows do not sum to 1
    with pytest.raises(ValueError):
        TabularCmdp(p, np.zeros((2, 2)), np.zeros((2, 2)), 0.9, 1.0, np.array([1.0, 0.0]))


def test_policy_eval_gamma_zero_returns_table():
    rng = np.random.default_rng(0)
    cmdp = random_cmdp(rng, gamma=0.0)
    pol = np.full((10, 3), 1 / 3)
    out = policy_eval_exact(cmdp, pol, "reward")
    assert np.abs(out.q - cmdp.rewards).max() < 1e-12


def test_policy_eval_geometric_series():
    p = np.ones((1, 1, 1))
    cmdp = TabularCmdp(p, np.array([[1.0]]), np.array([[0.0]]), 0.5, 1.0, np.array([1.0]))
    out = policy_eval_exact(cmdp, np.array([[1.0]]), "reward")
    assert np.isclose(out.q[0, 0], 2.0, atol=1e-12)


def test_policy_eval_linear_solve_matches_iterative_oracle():
    rng = np.random.default_rng(1)
    cmdp = random_cmdp(rng)
    pol = rng.uniform(size=(10, 3))
    pol /= pol.sum(axis=1, keepdims=True)
    exact = policy_eval_exact(cmdp, pol, "cost").q
    # independent fixed-point iteration oracle
    q = np.zeros((10, 3))
    for _ in range(2000):
        v = (pol * q).sum(axis=1)
        q = cmdp.costs + cmdp.discount * cmdp.transitions @ v
    assert np.abs(exact - q).max() < 1e-8


def test_policy_eval_refuses_gamma_one():
    rng = np.random.default_rng(2)
    cmdp = random_cmdp(rng)
    cmdp.discount = 1.0
    with pytest.raises(NonContractiveError):
        policy_eval_exact(cmdp, np.full((10, 3), 1 / 3))


def test_residual_tolerance_met():
    rng = np.random.default_rng(3)
    cmdp = random_cmdp(rng)
    pol = np.full((10, 3), 1 / 3)
    for channel in ("reward", "cost"):
        assert policy_eval_exact(cmdp, pol, channel, tol=1e-10).residual <= 1e-10


def test_lagrangian_vi_zero_multiplier_ignores_cost():
    rng = np.random.default_rng(4)
    cmdp = random_cmdp(rng)
    actions, _ = lagrangian_vi(cmdp, 0.0)
    no_cost = TabularCmdp(
        cmdp.transitions, cmdp.rewards, np.zeros_like(cmdp.costs),
        cmdp.discount, cmdp.cost_threshold, cmdp.initial_dist,
    )
    actions2, _ = lagrangian_vi(no_cost, 123.0)  # any multiplier: cost is zero
    assert np.array_equal(actions, actions2)


def test_lagrangian_vi_constant_shift_invariance():
    rng = np.random.default_rng(5)
    cmdp = random_cmdp(rng)
    actions, _ = lagrangian_vi(cmdp, 0.7)
    shifted = TabularCmdp(
        cmdp.transitions, cmdp.rewards + 5.0, cmdp.costs,
        cmdp.discount, cmdp.cost_threshold, cmdp.initial_dist,
    )
    actions2, _ = lagrangian_vi(shifted, 0.7)
    assert np.array_equal(actions, actions2)


def test_lagrangian_vi_large_multiplier_avoids_boundary():
    env = GridCircleWorld(n=5, slip=0.1)
    cmdp = env.to_tabular()
    actions, _ = lagrangian_vi(cmdp, 1e7)
    for s in range(25):
        if not env.boundary[s]:
            intended = env._move(s, int(actions[s]))
            assert not env.boundary[intended], f"interior state {s} steps into the boundary"


def test_bellman_optimality_residual():
    rng = np.random.default_rng(6)
    cmdp = random_cmdp(rng)
    lam = 0.3
    _, q = lagrangian_vi(cmdp, lam, tol=1e-10)
    table = cmdp.rewards - lam * cmdp.costs
    residual = np.abs(q - (table + cmdp.discount * cmdp.transitions @ q.max(axis=1))).max()
    assert residual < 1e-8


def test_constrained_optimum_bandit_by_hand():
    # arm A (r=1, c=2), arm B (0, 0), threshold 1, gamma 0:
    # the single-simplex program gives p(A) = 0.5, R* = 0.5, C* = 1
    sol = constrained_optimum(bandit())
    assert abs(sol.reward_value - 0.5) < 1e-6
    assert abs(sol.cost_value - 1.0) < 1e-6
    assert abs(sol.lambda_star - 0.5) < 1e-3
    weights = {tuple(p.tolist()): w for p, w in zip(sol.policies, sol.weights)}
    assert abs(weights.get((0,), 0.0) - 0.5) < 1e-6  # arm A half the time


def test_constrained_optimum_inactive_constraint():
    rng = np.random.default_rng(7)
    cmdp = random_cmdp(rng, c_th=1e6)
    sol = constrained_optimum(cmdp)
    assert sol.lambda_star == 0.0
    greedy, _ = lagrangian_vi(cmdp, 0.0)
    assert np.array_equal(sol.policies[0], greedy)


def test_constrained_optimum_threshold_sweep_monotone():
    rng = np.random.default_rng(8)
    base = random_cmdp(rng, n_states=6, n_actions=2, gamma=0.8)
    rewards = []
    for c_th in (4.5, 4.0, 3.5, 3.0):
        cmdp = TabularCmdp(
            base.transitions, base.rewards, base.costs, base.discount, c_th, base.initial_dist
        )
        rewards.append(constrained_optimum(cmdp).reward_value)
    assert all(r2 <= r1 + 1e-9 for r1, r2 in zip(rewards, rewards[1:]))


def test_constrained_optimum_infeasible():
    p = np.ones((1, 1, 1))
    cmdp = TabularCmdp(p, np.array([[1.0]]), np.array([[1.0]]), 0.5, 0.5, np.array([1.0]))
    with pytest.raises(InfeasibleCmdpError):
        constrained_optimum(cmdp)  # the only policy has cost 2 > 0.5


def test_weak_duality_direction():
    rng = np.random.default_rng(9)
    cmdp = random_cmdp(rng, n_states=6, n_actions=2, gamma=0.85, c_th=3.5)
    sol = constrained_optimum(cmdp)
    r_star, c_star = sol.reward_value, sol.cost_value
    for lam in (0.0, 0.3, 1.0, 4.0):
        greedy, _ = lagrangian_vi(cmdp, lam)
        mat = deterministic_policy_matrix(greedy, cmdp.n_actions)
        r_lam = policy_value(cmdp, mat, "reward")
        c_lam = policy_value(cmdp, mat, "cost")
        lhs = r_lam - lam * (c_lam - cmdp.cost_threshold)
        rhs = r_star - lam * (c_star - cmdp.cost_threshold)
        assert lhs >= rhs - 1e-7


def test_batched_policy_evaluation_matches_single():
    rng = np.random.default_rng(10)
    cmdp = random_cmdp(rng, n_states=5, n_actions=3)
    actions = rng.integers(3, size=(20, 5))
    r_batch, c_batch = evaluate_deterministic_policies(cmdp, actions)
    for i in (0, 7, 19):
        mat = deterministic_policy_matrix(actions[i], 3)
        assert abs(r_batch[i] - policy_value(cmdp, mat, "reward")) < 1e-9
        assert abs(c_batch[i] - policy_value(cmdp, mat, "cost")) < 1e-9


def test_json_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    cmdp = random_cmdp(rng, n_states=4, n_actions=2)
    path = tmp_path / "cmdp.json"
    save_tabular(cmdp, path)
    loaded = load_tabular(path)
    assert np.array_equal(loaded.transitions, cmdp.transitions)
    assert np.array_equal(loaded.rewards, cmdp.rewards)
    assert np.array_equal(loaded.costs, cmdp.costs)
    assert loaded.discount == cmdp.discount
    assert loaded.cost_threshold == cmdp.cost_threshold


def test_exact_eval_agrees_with_mc_probe_estimates():
    # spot-check the solver against on-env Monte Carlo at 20 probe pairs
    from safelab.vpa import mc_q_estimate
    from safelab.envs import RandomPolicy

    env = GridCircleWorld(n=5, slip=0.1, episode_length=100, discount=0.9)
    cmdp = env.to_tabular()
    uniform = np.full((25, 4), 0.25)
    exact_r = policy_eval_exact(cmdp, uniform, "reward").q
    exact_c = policy_eval_exact(cmdp, uniform, "cost").q
    pol = RandomPolicy(env.spec.action_space)
    rng = np.random.default_rng(12)
    n_roll = 300
    for probe in range(20):
        s = int(rng.integers(25))
        a = int(rng.integers(4))
        q_hat, qc_hat = mc_q_estimate(pol, env, s, a, 0.9, n_rollouts=n_roll, seed=probe)
        # crude per-probe standard error bound: discounted sums lie in [0, 10]
        se = 10.0 / np.sqrt(12 * n_roll)
        bias = 0.9**100 * 10.0
        assert abs(q_hat - exact_r[s, a]) < 4 * se + bias
        assert abs(qc_hat - exact_c[s, a]) < 4 * se + bias
