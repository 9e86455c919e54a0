"""Exact solvers for small tabular constrained MDPs.

Everything here works on explicit transition/reward/cost tensors, so the
answers are ground truth up to solver tolerance: exact policy evaluation
(linear solve), value iteration on a multiplier-scalarized reward, and a
dual bisection that recovers the constrained optimum as a mixture of the
two deterministic policies bracketing the threshold.

Mixture semantics: a mixed solution means "pick component i with weight
w_i at episode start and follow it throughout", so reward and cost are
the convex combinations of the component values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

__all__ = [
    "TabularCmdp",
    "ExactQ",
    "ConstrainedSolution",
    "InfeasibleCmdpError",
    "NonContractiveError",
    "deterministic_policy_matrix",
    "policy_eval_exact",
    "policy_value",
    "lagrangian_vi",
    "constrained_optimum",
    "evaluate_deterministic_policies",
    "save_tabular",
    "load_tabular",
]


class InfeasibleCmdpError(ValueError):
    """No policy satisfies the cost constraint."""


class NonContractiveError(ValueError):
    """Discount 1 without absorbing structure: fixed point is not defined."""


@dataclass
class TabularCmdp:
    """Explicit CMDP: P[s, a, s'], R[s, a], C[s, a], discount, threshold, eta."""

    transitions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    discount: float
    cost_threshold: float
    initial_dist: np.ndarray

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.costs = np.asarray(self.costs, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        s, a, s2 = self.transitions.shape
        if s != s2:
            raise ValueError("transition tensor must be (S, A, S)")
        if self.rewards.shape != (s, a) or self.costs.shape != (s, a):
            raise ValueError("reward/cost tables must be (S, A)")
        if self.initial_dist.shape != (s,):
            raise ValueError("initial distribution must be (S,)")
        rowsums = self.transitions.sum(axis=2)
        if not np.allclose(rowsums, 1.0, atol=1e-9):
            raise ValueError("every P[s, a, :] must sum to 1")
        if not np.isclose(self.initial_dist.sum(), 1.0, atol=1e-9):
            raise ValueError("initial distribution must sum to 1")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def channel(self, name: str) -> np.ndarray:
        if name == "reward":
            return self.rewards
        if name == "cost":
            return self.costs
        raise ValueError(f"unknown channel {name!r} (expected 'reward' or 'cost')")


@dataclass
class ExactQ:
    """Exact Q table of one channel for one evaluated policy."""

    q: np.ndarray
    channel: str
    policy: np.ndarray
    residual: float


@dataclass
class ConstrainedSolution:
    """Constrained optimum as a start-of-episode mixture of deterministic policies."""

    lambda_star: float
    policies: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    reward_value: float = 0.0
    cost_value: float = 0.0
    component_values: list = field(default_factory=list)


def deterministic_policy_matrix(actions: np.ndarray, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.intp)
    mat = np.zeros((actions.shape[0], n_actions))
    mat[np.arange(actions.shape[0]), actions] = 1.0
    return mat


def _check_policy(cmdp: TabularCmdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (cmdp.n_states, cmdp.n_actions):
        raise ValueError(f"policy must be ({cmdp.n_states}, {cmdp.n_actions})")
    if not np.allclose(policy.sum(axis=1), 1.0, atol=1e-9) or (policy < -1e-12).any():
        raise ValueError("policy rows must be distributions")
    return policy


def policy_eval_exact(
    cmdp: TabularCmdp, policy: np.ndarray, channel: str = "reward", tol: float = 1e-10
) -> ExactQ:
    """Exact Q of a stationary stochastic policy via a direct linear solve."""
    policy = _check_policy(cmdp, policy)
    if cmdp.discount >= 1.0:
        raise NonContractiveError("policy evaluation requires discount < 1")
    x = cmdp.channel(channel)
    p_pi = np.einsum("sa,sap->sp", policy, cmdp.transitions)
    x_pi = (policy * x).sum(axis=1)
    a_mat = np.eye(cmdp.n_states) - cmdp.discount * p_pi
    v = np.linalg.solve(a_mat, x_pi)
    q = x + cmdp.discount * cmdp.transitions @ v
    # fixed-point residual on the returned table
    v_check = (policy * q).sum(axis=1)
    residual = float(np.abs(q - (x + cmdp.discount * cmdp.transitions @ v_check)).max())
    if residual > tol:
        raise RuntimeError(f"policy evaluation residual {residual:.3e} exceeds {tol:.3e}")
    return ExactQ(q=q, channel=channel, policy=policy, residual=residual)


def policy_value(cmdp: TabularCmdp, policy: np.ndarray, channel: str = "reward") -> float:
    """eta-weighted value of a policy on one channel."""
    exact = policy_eval_exact(cmdp, policy, channel)
    v = (exact.policy * exact.q).sum(axis=1)
    return float(cmdp.initial_dist @ v)


def _value_iteration(cmdp: TabularCmdp, table: np.ndarray, tol: float):
    """Optimal V and greedy actions for an arbitrary (S, A) payoff table."""
    gamma = cmdp.discount
    v = np.zeros(cmdp.n_states)
    if gamma == 0.0:
        q = table.copy()
        return q.max(axis=1), np.argmax(q, axis=1), q
    span = table.max() - table.min() + 1.0
    max_iter = int(np.ceil(np.log(tol * (1 - gamma) / span) / np.log(gamma))) + 2
    for _ in range(max(max_iter, 1)):
        q = table + gamma * cmdp.transitions @ v
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() <= tol * (1 - gamma) / (2 * gamma):
            v = v_new
            break
        v = v_new
    q = table + gamma * cmdp.transitions @ v
    return q.max(axis=1), np.argmax(q, axis=1), q


def lagrangian_vi(cmdp: TabularCmdp, lam: float, tol: float = 1e-10):
    """Greedy optimal policy of the scalarized MDP with payoff R - lam * C.

    Returns (actions, q_lambda) where actions is the deterministic greedy
    policy and q_lambda its Bellman-optimal Q table.
    """
    if lam < 0:
        raise ValueError("multiplier must be nonnegative")
    table = cmdp.rewards - lam * cmdp.costs
    _, actions, q = _value_iteration(cmdp, table, tol)
    return actions, q


def _det_values(cmdp: TabularCmdp, actions: np.ndarray):
    mat = deterministic_policy_matrix(actions, cmdp.n_actions)
    return policy_value(cmdp, mat, "reward"), policy_value(cmdp, mat, "cost")


def constrained_optimum(
    cmdp: TabularCmdp,
    tol: float = 1e-8,
    eval_tol: float = 1e-10,
    cost_resolution: float = 1e-6,
) -> ConstrainedSolution:
    """Reward-maximal policy subject to the cost constraint, by dual bisection.

    The dual function is piecewise linear in the multiplier; at its kink two
    deterministic scalarized-optimal policies straddle the threshold and the
    start-of-episode mixture meeting the threshold exactly is primal optimal.
    """
    if cmdp.discount >= 1.0:
        raise NonContractiveError("constrained optimum requires discount < 1")
    c_th = cmdp.cost_threshold

    greedy0, _ = lagrangian_vi(cmdp, 0.0, eval_tol)
    r0, c0 = _det_values(cmdp, greedy0)
    if c0 <= c_th + tol:
        return ConstrainedSolution(
            lambda_star=0.0,
            policies=[greedy0],
            weights=[1.0],
            reward_value=r0,
            cost_value=c0,
            component_values=[(r0, c0)],
        )

    # feasibility: the cost-minimizing policy must satisfy the constraint
    _, min_cost_actions, _ = _value_iteration(cmdp, -cmdp.costs, eval_tol)
    _, c_min = _det_values(cmdp, min_cost_actions)
    if c_min > c_th + tol:
        raise InfeasibleCmdpError(
            f"minimum achievable cost {c_min:.6g} exceeds threshold {c_th:.6g}"
        )

    lam_cap = (cmdp.rewards.max() - cmdp.rewards.min() + 1.0) / (
        (1.0 - cmdp.discount) * cost_resolution
    )
    lam_hi = 1.0
    while True:
        greedy_hi, _ = lagrangian_vi(cmdp, lam_hi, eval_tol)
        r_hi, c_hi = _det_values(cmdp, greedy_hi)
        if c_hi <= c_th + tol:
            break
        if lam_hi > lam_cap:
            raise InfeasibleCmdpError(
                "no multiplier below the cap produces a feasible greedy policy"
            )
        lam_hi *= 2.0

    lam_lo = 0.0
    lo_actions, (r_lo, c_lo) = greedy0, (r0, c0)
    for _ in range(200):
        mid = 0.5 * (lam_lo + lam_hi)
        greedy_mid, _ = lagrangian_vi(cmdp, mid, eval_tol)
        r_mid, c_mid = _det_values(cmdp, greedy_mid)
        if c_mid > c_th + tol:
            lam_lo, lo_actions, r_lo, c_lo = mid, greedy_mid, r_mid, c_mid
        else:
            lam_hi, greedy_hi, r_hi, c_hi = mid, greedy_mid, r_mid, c_mid
        if lam_hi - lam_lo <= 1e-13 * max(1.0, lam_hi):
            break

    lam_star = 0.5 * (lam_lo + lam_hi)
    if abs(c_lo - c_hi) < 1e-12:
        return ConstrainedSolution(
            lambda_star=lam_star,
            policies=[greedy_hi],
            weights=[1.0],
            reward_value=r_hi,
            cost_value=c_hi,
            component_values=[(r_hi, c_hi)],
        )
    p = (c_th - c_hi) / (c_lo - c_hi)
    p = float(np.clip(p, 0.0, 1.0))
    return ConstrainedSolution(
        lambda_star=lam_star,
        policies=[lo_actions, greedy_hi],
        weights=[p, 1.0 - p],
        reward_value=p * r_lo + (1.0 - p) * r_hi,
        cost_value=p * c_lo + (1.0 - p) * c_hi,
        component_values=[(r_lo, c_lo), (r_hi, c_hi)],
    )


def evaluate_deterministic_policies(cmdp: TabularCmdp, actions: np.ndarray):
    """Batched exact (reward, cost) values for K deterministic policies.

    ``actions`` has shape (K, S); returns two (K,) arrays. Used for
    exhaustive enumeration on very small models.
    """
    actions = np.asarray(actions, dtype=np.intp)
    k, s = actions.shape
    idx = np.arange(s)
    p_pi = cmdp.transitions[idx[None, :], actions, :]
    a_mat = np.eye(s)[None, :, :] - cmdp.discount * p_pi
    rhs = np.stack(
        [cmdp.rewards[idx[None, :], actions], cmdp.costs[idx[None, :], actions]], axis=2
    )
    v = np.linalg.solve(a_mat, rhs)
    vals = np.einsum("s,ksc->kc", cmdp.initial_dist, v)
    return vals[:, 0], vals[:, 1]


# ---------------------------------------------------------------------------
# JSON fixtures
# ---------------------------------------------------------------------------


def save_tabular(cmdp: TabularCmdp, path) -> None:
    payload = {
        "transitions": cmdp.transitions.tolist(),
        "rewards": cmdp.rewards.tolist(),
        "costs": cmdp.costs.tolist(),
        "discount": cmdp.discount,
        "cost_threshold": cmdp.cost_threshold,
        "initial_dist": cmdp.initial_dist.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_tabular(path) -> TabularCmdp:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return TabularCmdp(
        transitions=payload["transitions"],
        rewards=payload["rewards"],
        costs=payload["costs"],
        discount=payload["discount"],
        cost_threshold=payload["cost_threshold"],
        initial_dist=payload["initial_dist"],
    )
