"""Online finetuning: soft actor-critic with a cost critic and a multiplier.

Each round interacts for a fixed number of episodes, takes one gradient
step per network from a uniform replay sample, and then lets the plugged
controller move the Lagrange multiplier from the rollout episode costs.
The actor loss trades reward value against multiplier-weighted cost value
plus an entropy bonus; the reward critic target carries the same entropy
bonus, while the cost critic target does not.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .envs import Environment, Trajectory, Transition, rollout
from .lagrange import LagrangeController
from .nets import (
    AdamState,
    DivergenceError,
    GaussianPolicy,
    Mlp,
    SoftmaxPolicy,
    action_enc_dim,
    adam_step,
    critic_values,
    critic_values_all_discrete,
    save_checkpoint,
    soft_update,
)
from .offline import CpqResult, bellman_bootstrap, reward_critic_loss

__all__ = [
    "ReplayBuffer",
    "SacLagConfig",
    "FinetuneResult",
    "sac_q_update",
    "sac_qc_update",
    "sac_policy_update",
    "sac_policy_loss",
    "evaluate_policy",
    "finetune_loop",
    "write_metrics_csv",
    "METRICS_COLUMNS",
]

METRICS_COLUMNS = [
    "step",
    "eval_return",
    "eval_cost",
    "lambda",
    "kp",
    "ki",
    "kd",
    "err",
    "cum_env_cost",
    "max_return_so_far",
]


class ReplayBuffer:
    """Fixed-capacity transition ring with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, space):
        self.capacity = int(capacity)
        self.discrete = hasattr(space, "n")
        self.s = np.zeros((self.capacity, obs_dim))
        self.a = (
            np.zeros(self.capacity, dtype=np.intp)
            if self.discrete
            else np.zeros((self.capacity, space.dim))
        )
        self.r = np.zeros(self.capacity)
        self.c = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity, dtype=bool)
        self.insert_count = 0

    def __len__(self) -> int:
        return min(self.insert_count, self.capacity)

    def add(self, tr: Transition) -> None:
        i = self.insert_count % self.capacity
        self.s[i] = tr.s
        self.a[i] = tr.a
        self.r[i] = tr.r
        self.c[i] = tr.c
        self.s2[i] = tr.s_next
        self.done[i] = tr.done
        self.insert_count += 1

    def add_trajectory(self, traj: Trajectory) -> None:
        for tr in traj.transitions:
            self.add(tr)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        n = len(self)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(n, size=batch_size)
        return {
            "s": self.s[idx],
            "a": self.a[idx],
            "r": self.r[idx],
            "c": self.c[idx],
            "s2": self.s2[idx],
            "done": self.done[idx],
        }


@dataclass
class SacLagConfig:
    """Online stage hyperparameters (defaults follow the offline stage's scale)."""

    entropy_alpha: float = 5e-3
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 5e-2
    policy_lr: float = 5e-5
    q_lr: float = 3e-5
    qc_lr: float = 8e-5
    episodes_per_update: int = 3
    total_steps: int = 100
    controller: str = "apid"
    init_mode: str = "warm_start"
    buffer_capacity: int = 1_000_000
    eval_episodes: int = 5
    bootstrap_samples: int = 1
    hidden: tuple = (64, 64)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.controller not in ("dual", "pid", "apid"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.init_mode not in ("warm_start", "from_scratch"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        for name in ("entropy_alpha", "batch_size", "tau", "policy_lr", "q_lr", "qc_lr",
                     "episodes_per_update", "buffer_capacity", "eval_episodes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def resolve(self, env_spec) -> "SacLagConfig":
        return replace(self, gamma=env_spec.discount)


@dataclass
class FinetuneResult:
    policy: object
    q: Mlp
    qc: Mlp
    q_target: Mlp
    qc_target: Mlp
    controller: LagrangeController
    metrics: list


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------


def sac_q_update(batch, q, q_target, policy, cfg, space, opt, rng):
    """One step toward r + gamma * E[Q'(s', a') - alpha log pi]; soft-updates the target."""
    if batch["s"].shape[0] == 0:
        raise ValueError("empty batch")
    targets = batch["r"] + cfg.gamma * (1.0 - batch["done"].astype(np.float64)) * bellman_bootstrap(
        policy,
        batch["s2"],
        lambda o, a: critic_values(q_target, o, a, space),
        cfg.entropy_alpha,
        cfg.bootstrap_samples,
        rng,
    )
    params = Var(q.params)
    loss = reward_critic_loss(q, params, batch, targets, space)
    loss.backward()
    q.params = adam_step(opt, q.params, params.grad)
    soft_update(q_target, q, cfg.tau)
    return float(loss.value)


def sac_qc_update(batch, qc, qc_target, policy, cfg, space, opt, rng):
    """Cost critic step; the bootstrap carries no entropy term."""
    if batch["s"].shape[0] == 0:
        raise ValueError("empty batch")
    targets = batch["c"] + cfg.gamma * (1.0 - batch["done"].astype(np.float64)) * bellman_bootstrap(
        policy,
        batch["s2"],
        lambda o, a: critic_values(qc_target, o, a, space),
        0.0,
        cfg.bootstrap_samples,
        rng,
    )
    params = Var(qc.params)
    batch_c = dict(batch)
    batch_c["r"] = batch["c"]
    loss = reward_critic_loss(qc, params, batch_c, targets, space)
    loss.backward()
    qc.params = adam_step(opt, qc.params, params.grad)
    soft_update(qc_target, qc, cfg.tau)
    return float(loss.value)


def sac_policy_loss(policy, params: Var, obs: np.ndarray, q: Mlp, qc: Mlp, lam: float,
                    entropy_alpha: float, space, eps: np.ndarray | None) -> Var:
    """mean over states of E_pi[alpha log pi - Q + lam * Qc], differentiable in theta."""
    if isinstance(policy, SoftmaxPolicy):
        probs, logps = policy.probs_and_logprobs_var(params, obs)
        q_all = critic_values_all_discrete(q, obs, space)
        qc_all = critic_values_all_discrete(qc, obs, space)
        inner = probs * (entropy_alpha * logps - (q_all - lam * qc_all))
        return ad.vmean(ad.vsum(inner, axis=1))
    a_var, logp_var = policy.reparam_var(params, obs, eps)
    obs_const = ad.as_var(obs)
    q_in = ad.concat([obs_const, a_var], axis=1)
    q_vals = ad.reshape(q.forward_var(Var(q.params), q_in), (obs.shape[0],))
    qc_vals = ad.reshape(qc.forward_var(Var(qc.params), q_in), (obs.shape[0],))
    return ad.vmean(entropy_alpha * logp_var - (q_vals - lam * qc_vals))


def sac_policy_update(batch, policy, q, qc, lam, cfg, space, opt, rng):
    """One descent step on the multiplier-weighted actor objective."""
    if batch["s"].shape[0] == 0:
        raise ValueError("empty batch")
    eps = None
    if isinstance(policy, GaussianPolicy):
        eps = rng.standard_normal((batch["s"].shape[0], policy.action_dim))
    params = Var(policy.params)
    loss = sac_policy_loss(policy, params, batch["s"], q, qc, lam, cfg.entropy_alpha, space, eps)
    loss.backward()
    policy.params = adam_step(opt, policy.params, params.grad)
    return float(loss.value)


# ---------------------------------------------------------------------------
# evaluation and the loop
# ---------------------------------------------------------------------------


class _DeterministicWrapper:
    def __init__(self, policy):
        self.policy = policy

    def act(self, obs, rng):
        return self.policy.act_det(obs)


def evaluate_policy(policy, env: Environment, n_episodes: int = 5, seed: int = 0):
    """Mean undiscounted return and cost over deterministic-action episodes."""
    det = _DeterministicWrapper(policy)
    returns = np.zeros(n_episodes)
    costs = np.zeros(n_episodes)
    for i in range(n_episodes):
        ep_seed = int(np.random.SeedSequence([seed, 61, i]).generate_state(1)[0])
        traj = rollout(det, env, ep_seed)
        returns[i] = traj.rewards().sum()
        costs[i] = traj.costs().sum()
    return float(returns.mean()), float(costs.mean())


def _fresh_networks(env_spec, cfg: SacLagConfig, rng: np.random.Generator) -> CpqResult:
    space = env_spec.action_space
    hidden = list(cfg.hidden)
    critic_sizes = [env_spec.obs_dim + action_enc_dim(space)] + hidden + [1]
    if hasattr(space, "n"):
        policy = SoftmaxPolicy.init_random([env_spec.obs_dim] + hidden + [space.n], rng)
    else:
        policy = GaussianPolicy.init_random([env_spec.obs_dim] + hidden + [space.dim], rng)
    q = Mlp.init_random(critic_sizes, rng)
    qc = Mlp.init_random(critic_sizes, rng)
    return CpqResult(policy=policy, q=q, qc=qc, q_target=q.clone(), qc_target=qc.clone())


def finetune_loop(
    env: Environment,
    init: CpqResult | None,
    controller: LagrangeController,
    cfg: SacLagConfig,
    seed: int,
    metrics_path=None,
    checkpoint_dir=None,
) -> FinetuneResult:
    """Run the online stage; returns final networks and per-step metrics rows.

    warm_start clones the given networks bit-for-bit; from_scratch draws
    fresh ones. The replay buffer starts empty either way.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 71]))
    if cfg.init_mode == "warm_start":
        if init is None:
            raise ValueError("warm_start requires pretrained networks")
        policy = init.policy.clone()
        q, qc = init.q.clone(), init.qc.clone()
        q_target, qc_target = init.q_target.clone(), init.qc_target.clone()
    else:
        fresh = _fresh_networks(env.spec, cfg, rng)
        policy, q, qc = fresh.policy, fresh.q, fresh.qc
        q_target, qc_target = fresh.q_target, fresh.qc_target

    space = env.spec.action_space
    c_th = env.spec.cost_threshold
    buffer = ReplayBuffer(cfg.buffer_capacity, env.spec.obs_dim, space)
    opt_q = AdamState(lr=cfg.q_lr)
    opt_qc = AdamState(lr=cfg.qc_lr)
    opt_pi = AdamState(lr=cfg.policy_lr)

    metrics = []
    cum_env_cost = 0.0
    max_return = -np.inf
    for step in range(1, cfg.total_steps + 1):
        episode_costs = []
        for _ in range(cfg.episodes_per_update):
            ep_seed = int(rng.integers(2**31))
            traj = rollout(policy, env, ep_seed)
            buffer.add_trajectory(traj)
            ep_cost = float(traj.costs().sum())
            episode_costs.append(ep_cost)
            cum_env_cost += ep_cost
        batch = buffer.sample(cfg.batch_size, rng)
        lam = controller.lam
        try:
            sac_q_update(batch, q, q_target, policy, cfg, space, opt_q, rng)
            sac_qc_update(batch, qc, qc_target, policy, cfg, space, opt_qc, rng)
            sac_policy_update(batch, policy, q, qc, lam, cfg, space, opt_pi, rng)
        except DivergenceError as exc:
            raise DivergenceError(
                f"online finetuning diverged at step {step} "
                f"(lambda={lam:.6g}, buffer={len(buffer)}): {exc}"
            ) from exc
        lam = controller.update(episode_costs, c_th)
        kp, ki, kd = controller.gains()
        eval_return, eval_cost = evaluate_policy(
            policy, env, cfg.eval_episodes, seed=seed * 100_003 + step
        )
        max_return = max(max_return, eval_return)
        metrics.append(
            {
                "step": step,
                "eval_return": eval_return,
                "eval_cost": eval_cost,
                "lambda": lam,
                "kp": kp,
                "ki": ki,
                "kd": kd,
                "err": controller.last_error,
                "cum_env_cost": cum_env_cost,
                "max_return_so_far": max_return,
            }
        )
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
            for name, net in (("policy", policy), ("q", q), ("qc", qc),
                              ("q_target", q_target), ("qc_target", qc_target)):
                save_checkpoint(f"{checkpoint_dir}/{name}_step{step}.ckpt", net)

    if metrics_path is not None:
        write_metrics_csv(metrics, metrics_path)
    return FinetuneResult(
        policy=policy,
        q=q,
        qc=qc,
        q_target=q_target,
        qc_target=qc_target,
        controller=controller,
        metrics=metrics,
    )


def write_metrics_csv(metrics: list, path) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for row in metrics:
        lines.append(
            ",".join(
                str(row[k]) if k == "step" else repr(float(row[k])) for k in METRICS_COLUMNS
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
