"""Offline stage: dataset generation, serialization, and conservative pretraining.

Pretraining fits a policy and two critics to a logged dataset while
penalizing the cost critic downward nowhere and upward on out-of-support
actions: the cost critic loss subtracts a weight times the mean cost value
of sampled OOD actions (driving those estimates up), the reward critic
bootstraps only through next actions whose estimated cost clears an
in-distribution threshold, and the policy maximizes reward value under the
same cost indicator.

OOD actions come from a nearest-neighbor support model instead of a
generative model: an action is out-of-distribution at a state when the
joint (s, a) point is farther from the dataset than a fitted quantile of
within-dataset neighbor distances.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import json

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .envs import Environment, Transition
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
    encode_actions,
    soft_update,
)

__all__ = [
    "OfflineDataset",
    "DatasetFormatError",
    "OodSampler",
    "CpqConfig",
    "CpqResult",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "ood_sample",
    "cpq_update_qc",
    "cpq_update_q",
    "cpq_update_policy",
    "pretrain",
    "bellman_bootstrap",
]


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the offending line."""


@dataclass
class OfflineDataset:
    """Column-oriented transition store plus provenance metadata."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    c: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    env_name: str
    behavior: str
    seed: int

    def __len__(self) -> int:
        return self.s.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    def zero_cost_fraction(self) -> float:
        return float((self.c == 0.0).mean())

    def meta(self) -> dict:
        return {
            "env_name": self.env_name,
            "behavior": self.behavior,
            "size": self.size,
            "zero_cost_fraction": self.zero_cost_fraction(),
            "seed": self.seed,
        }

    def transition(self, i: int) -> Transition:
        a = self.a[i]
        return Transition(
            s=self.s[i],
            a=int(a) if self.a.ndim == 1 else a,
            r=float(self.r[i]),
            c=float(self.c[i]),
            s_next=self.s2[i],
            done=bool(self.done[i]),
        )

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(len(self), size=batch_size)
        return {
            "s": self.s[idx],
            "a": self.a[idx],
            "r": self.r[idx],
            "c": self.c[idx],
            "s2": self.s2[idx],
            "done": self.done[idx],
            "idx": idx,
        }


def generate_dataset(env: Environment, behavior_mix, size: int, seed: int) -> OfflineDataset:
    """Roll out a mixture of behavior policies until ``size`` transitions exist.

    Each episode picks one policy from the mixture; rollouts are seeded from
    one stream so the dataset is a pure function of ``seed``.
    """
    if size < 1:
        raise ValueError("dataset size must be at least 1")
    weights = np.array([w for _, w in behavior_mix], dtype=np.float64)
    if weights.min() < 0 or not np.isclose(weights.sum(), 1.0, atol=1e-9):
        raise ValueError("behavior weights must be nonnegative and sum to 1")
    policies = [p for p, _ in behavior_mix]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))

    cols = {k: [] for k in ("s", "a", "r", "c", "s2", "done")}
    total = 0
    while total < size:
        pol = policies[int(rng.choice(len(policies), p=weights))]
        episode_seed = int(rng.integers(2**31))
        obs = env.reset(episode_seed)
        pol_rng = np.random.default_rng(np.random.SeedSequence([episode_seed, 1]))
        done = False
        while not done and total < size:
            a = pol.act(obs, pol_rng)
            obs_next, r, c, done = env.step(a)
            cols["s"].append(obs)
            cols["a"].append(a)
            cols["r"].append(r)
            cols["c"].append(c)
            cols["s2"].append(obs_next)
            cols["done"].append(done)
            obs = obs_next
            total += 1

    discrete = hasattr(env.spec.action_space, "n")
    behavior = "+".join(
        f"{type(p).__name__}:{w:g}" for p, w in zip(policies, weights)
    )
    return OfflineDataset(
        s=np.array(cols["s"], dtype=np.float64),
        a=np.array(cols["a"], dtype=np.intp if discrete else np.float64),
        r=np.array(cols["r"], dtype=np.float64),
        c=np.array(cols["c"], dtype=np.float64),
        s2=np.array(cols["s2"], dtype=np.float64),
        done=np.array(cols["done"], dtype=bool),
        env_name=env.spec.name,
        behavior=behavior,
        seed=seed,
    )


def save_dataset(dataset: OfflineDataset, path) -> None:
    """JSON-lines: a metadata header line, then one transition per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": dataset.meta()}) + "\n")
        discrete = dataset.a.ndim == 1
        for i in range(len(dataset)):
            row = {
                "s": dataset.s[i].tolist(),
                "a": int(dataset.a[i]) if discrete else dataset.a[i].tolist(),
                "r": float(dataset.r[i]),
                "c": float(dataset.c[i]),
                "s2": dataset.s2[i].tolist(),
                "done": bool(dataset.done[i]),
            }
            fh.write(json.dumps(row) + "\n")


def load_dataset(path) -> OfflineDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
        meta = header["meta"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"line 1: bad header ({exc})") from exc
    cols = {k: [] for k in ("s", "a", "r", "c", "s2", "done")}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
            for key in cols:
                cols[key].append(row[key])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetFormatError(
                f"line {lineno}: malformed transition (last valid line {lineno - 1}): {exc}"
            ) from exc
    n = len(cols["s"])
    if n != meta["size"]:
        raise DatasetFormatError(
            f"header size {meta['size']} but file holds {n} transitions "
            f"(last valid line {n + 1})"
        )
    discrete = n > 0 and isinstance(cols["a"][0], int)
    return OfflineDataset(
        s=np.array(cols["s"], dtype=np.float64),
        a=np.array(cols["a"], dtype=np.intp if discrete else np.float64),
        r=np.array(cols["r"], dtype=np.float64),
        c=np.array(cols["c"], dtype=np.float64),
        s2=np.array(cols["s2"], dtype=np.float64),
        done=np.array(cols["done"], dtype=bool),
        env_name=meta["env_name"],
        behavior=meta["behavior"],
        seed=meta["seed"],
    )


# ---------------------------------------------------------------------------
# nearest-neighbor OOD action source
# ---------------------------------------------------------------------------


class OodSampler:
    """Flags (s, a) pairs far from the dataset in joint space.

    A candidate is OOD when its distance to the k-th nearest dataset point
    exceeds the ``quantile`` level of the same k-th-neighbor distance
    measured within the dataset itself. Neighbor search is brute force
    against a reference set subsampled to ``max_ref`` points; membership
    tests use the equivalent count-within-radius form, which avoids
    computing order statistics per query.

    Training does not re-run rejection sampling every minibatch: since
    offline batches index a fixed dataset, :meth:`pool_for` serves OOD
    actions from per-row pools built lazily once.
    """

    def __init__(self, k: int = 5, quantile: float = 0.95, max_ref: int = 2048,
                 pool_size: int = 4):
        self.k = k
        self.quantile = quantile
        self.max_ref = max_ref
        self.pool_size = pool_size
        self.space = None
        self.threshold = None
        self._ref = None
        self._ref_sq = None
        self._pool_states = None
        self._pool_dataset_seed = 0
        self._pool_actions = None
        self._pool_warn = None

    def fit(self, dataset: OfflineDataset, space) -> "OodSampler":
        self.space = space
        ref = np.hstack([dataset.s, encode_actions(space, dataset.a)])
        if ref.shape[0] > self.max_ref:
            stride_idx = np.linspace(0, ref.shape[0] - 1, self.max_ref).astype(np.intp)
            ref = ref[stride_idx]
        self._ref = np.ascontiguousarray(ref)
        self._ref_sq = (ref * ref).sum(axis=1)
        # within-dataset k-th neighbor distances (self excluded via k+1)
        kth = self._kth_distance_raw(self._ref, self.k + 1)
        self.threshold = float(np.quantile(kth, self.quantile))
        self._pool_states = dataset.s
        self._pool_dataset_seed = dataset.seed
        return self

    def _require_fitted(self):
        if self._ref is None:
            raise RuntimeError("OodSampler.fit must be called first")

    def _dist_sq(self, pts: np.ndarray) -> np.ndarray:
        d2 = (pts * pts).sum(axis=1)[:, None] + self._ref_sq[None, :] - 2.0 * pts @ self._ref.T
        d2 = np.maximum(d2, 0.0)
        d2[d2 < 1e-12] = 0.0  # absorb matmul round-off on exact duplicates
        return d2

    def _kth_distance_raw(self, pts: np.ndarray, k: int) -> np.ndarray:
        k = min(k, self._ref.shape[0])
        out = np.empty(pts.shape[0])
        block = max(1, 4_000_000 // self._ref.shape[0])
        for lo in range(0, pts.shape[0], block):
            d2 = self._dist_sq(pts[lo : lo + block])
            out[lo : lo + block] = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
        return out

    def _counts_within(self, pts: np.ndarray) -> np.ndarray:
        """Number of reference points within the threshold of each query."""
        t2 = self.threshold * self.threshold
        out = np.empty(pts.shape[0], dtype=np.intp)
        block = max(1, 4_000_000 // self._ref.shape[0])
        for lo in range(0, pts.shape[0], block):
            d2 = self._dist_sq(pts[lo : lo + block])
            out[lo : lo + block] = (d2 <= t2).sum(axis=1)
        return out

    def _ood_flags_raw(self, pts: np.ndarray) -> np.ndarray:
        """kth-NN distance > threshold, via counting neighbors within it."""
        k = min(self.k, self._ref.shape[0])
        return self._counts_within(pts) < k

    def knn_distance(self, obs: np.ndarray, actions) -> np.ndarray:
        """Distance from (s, a) to its k-th nearest dataset point, batched."""
        self._require_fitted()
        pts = np.hstack([obs, encode_actions(self.space, actions)])
        return self._kth_distance_raw(pts, self.k)

    def is_ood(self, obs: np.ndarray, actions) -> np.ndarray:
        self._require_fitted()
        pts = np.hstack([obs, encode_actions(self.space, actions)])
        return self._ood_flags_raw(pts)

    def _propose(self, count: int, rng: np.random.Generator):
        if hasattr(self.space, "n"):
            return rng.integers(self.space.n, size=count)
        return rng.uniform(self.space.low, self.space.high, size=(count, self.space.dim))

    def sample(self, obs: np.ndarray, n: int, rng: np.random.Generator, budget: int = 10_000):
        """n OOD-labeled actions at one state by rejection from the uniform draw.

        Returns (actions, warning). If the budget of rejected proposals runs
        out (the dataset covers the whole action space at this state), the
        farthest proposals seen are returned best-effort with warning=True.
        """
        self._require_fitted()
        obs = np.asarray(obs, dtype=np.float64)
        found = []
        seen_actions = []
        seen_dists = []
        used = 0
        while len(found) < n and used < budget:
            chunk = min(max(4 * n, 16), budget - used)
            cands = self._propose(chunk, rng)
            used += chunk
            tiled = np.repeat(obs[None, :], chunk, axis=0)
            dists = self.knn_distance(tiled, cands)
            for i in np.nonzero(dists > self.threshold)[0]:
                if len(found) < n:
                    found.append(cands[i])
            seen_actions.append(cands)
            seen_dists.append(dists)
        if len(found) >= n:
            return self._stack(found), False
        all_a = np.concatenate(seen_actions, axis=0)
        all_d = np.concatenate(seen_dists)
        order = np.argsort(-all_d)[:n]
        return self._stack([all_a[i] for i in order]), True

    def sample_batch(self, obs: np.ndarray, n_per_state: int, rng: np.random.Generator,
                     max_rounds: int = 4):
        """Vectorized best-effort OOD actions for every state in a batch.

        Returns actions shaped (B, n) discrete or (B, n, d) continuous, and
        a (B,) warning mask for states where some slots never rejected to an
        OOD action (those hold the farthest proposal seen instead).
        """
        self._require_fitted()
        b = obs.shape[0]
        n = n_per_state
        discrete = hasattr(self.space, "n")
        best_d = np.full((b, n), -np.inf)
        best_a = (
            np.zeros((b, n), dtype=np.intp) if discrete else np.zeros((b, n, self.space.dim))
        )
        filled = np.zeros((b, n), dtype=bool)
        obs_rep = np.repeat(obs, n, axis=0)
        for _ in range(max_rounds):
            if filled.all():
                break
            cands = self._propose(b * n, rng)
            cands = cands.reshape(b, n) if discrete else cands.reshape(b, n, -1)
            flat = cands.reshape(b * n) if discrete else cands.reshape(b * n, -1)
            dists = self.knn_distance(obs_rep, flat).reshape(b, n)
            # unfilled slots keep their farthest proposal; an OOD hit locks the slot
            improve = ~filled & (dists > best_d)
            best_d = np.where(improve, dists, best_d)
            if discrete:
                best_a = np.where(improve, cands, best_a)
            else:
                best_a = np.where(improve[:, :, None], cands, best_a)
            filled |= improve & (dists > self.threshold)
        warn = ~filled.all(axis=1)
        return best_a, warn

    def _build_pools(self, rounds: int = 3) -> None:
        """One pool of pool_size out-of-support actions per dataset row.

        Rejection over neighbor counts: a proposal with fewer than k
        in-threshold neighbors locks its slot; slots that never lock keep
        the most isolated proposal seen (lowest count) and raise the row's
        warning flag.
        """
        states = self._pool_states
        rng = np.random.default_rng(np.random.SeedSequence([self._pool_dataset_seed, 17]))
        n_rows = states.shape[0]
        n = self.pool_size
        k = min(self.k, self._ref.shape[0])
        discrete = hasattr(self.space, "n")
        best_count = np.full((n_rows, n), np.iinfo(np.intp).max, dtype=np.intp)
        best_a = (
            np.zeros((n_rows, n), dtype=np.intp)
            if discrete
            else np.zeros((n_rows, n, self.space.dim))
        )
        filled = np.zeros((n_rows, n), dtype=bool)
        states_rep = np.repeat(states, n, axis=0)
        for _ in range(rounds):
            if filled.all():
                break
            cands = self._propose(n_rows * n, rng)
            pts = np.hstack([states_rep, encode_actions(self.space, cands)])
            counts = self._counts_within(pts).reshape(n_rows, n)
            cands = cands.reshape(n_rows, n) if discrete else cands.reshape(n_rows, n, -1)
            improve = ~filled & (counts < best_count)
            best_count = np.where(improve, counts, best_count)
            if discrete:
                best_a = np.where(improve, cands, best_a)
            else:
                best_a = np.where(improve[:, :, None], cands, best_a)
            filled |= improve & (counts < k)
        self._pool_actions = best_a
        self._pool_warn = ~filled.all(axis=1)

    def pool_for(self, idx: np.ndarray, n_per_state: int, rng: np.random.Generator):
        """OOD actions for dataset rows ``idx``, drawn from precomputed pools."""
        self._require_fitted()
        if self._pool_actions is None:
            self._build_pools()
        cols = rng.integers(self.pool_size, size=(idx.shape[0], n_per_state))
        rows = np.asarray(idx, dtype=np.intp)[:, None]
        return self._pool_actions[rows, cols], self._pool_warn[rows[:, 0]]

    def _stack(self, actions):
        if hasattr(self.space, "n"):
            return np.array(actions, dtype=np.intp)
        return np.array(actions, dtype=np.float64)


def ood_sample(sampler: OodSampler, obs: np.ndarray, n: int, seed: int):
    """Seeded wrapper over :meth:`OodSampler.sample`."""
    return sampler.sample(obs, n, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# bootstrap expectations
# ---------------------------------------------------------------------------


def bellman_bootstrap(policy, obs_next, value_fn, entropy_coef, m, rng):
    """E over next actions of value_fn(s', a') - entropy_coef * log pi(a'|s').

    ``m`` >= 1 draws sampled actions; m == 0 computes the exact expectation
    (discrete policies only). ``value_fn(obs, actions) -> (B,)``.
    """
    if m == 0:
        if not isinstance(policy, SoftmaxPolicy):
            raise ValueError("exact expectation requires a discrete policy head")
        p = policy.probs(obs_next)
        logp = np.log(np.maximum(p, 1e-300))
        b = obs_next.shape[0]
        vals = np.empty_like(p)
        for a in range(policy.n_actions):
            vals[:, a] = value_fn(obs_next, np.full(b, a, dtype=np.intp))
        return (p * (vals - entropy_coef * logp)).sum(axis=1)
    acts, logps = policy.sample_batch(obs_next, m, rng)
    total = np.zeros(obs_next.shape[0])
    for i in range(m):
        total += value_fn(obs_next, acts[i]) - entropy_coef * logps[i]
    return total / m


# ---------------------------------------------------------------------------
# conservative pretraining
# ---------------------------------------------------------------------------


@dataclass
class CpqConfig:
    """Knobs for the offline stage."""

    psi: float = 1.0
    cost_indicator_threshold: float | None = None  # default: c_th * (1 - gamma)
    update_count: int = 2000
    batch_size: int = 256
    policy_lr: float = 5e-5
    q_lr: float = 3e-5
    qc_lr: float = 8e-5
    tau: float = 5e-2
    gamma: float = 0.99
    bootstrap_samples: int = 1  # 0 = exact expectation (discrete only)
    n_ood: int = 8
    ood_k: int = 5
    ood_quantile: float = 0.95
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.psi < 0:
            raise ValueError("psi must be nonnegative")
        if self.cost_indicator_threshold is not None and self.cost_indicator_threshold < 0:
            raise ValueError("cost indicator threshold must be nonnegative")

    def resolve(self, env_spec) -> "CpqConfig":
        """Fill environment-dependent defaults (discount, indicator threshold)."""
        threshold = self.cost_indicator_threshold
        if threshold is None:
            threshold = env_spec.cost_threshold * (1.0 - env_spec.discount)
        return replace(
            self, gamma=env_spec.discount, cost_indicator_threshold=threshold
        )


@dataclass
class CpqResult:
    policy: object
    q: Mlp
    qc: Mlp
    q_target: Mlp
    qc_target: Mlp


def _mse_loss_var(net: Mlp, params: Var, inputs: np.ndarray, targets: np.ndarray) -> Var:
    pred = ad.reshape(net.forward_var(params, inputs), (inputs.shape[0],))
    diff = pred - targets
    return ad.vmean(diff * diff)


def cost_critic_loss(qc: Mlp, params: Var, batch: dict, targets: np.ndarray,
                     ood_inputs: np.ndarray | None, psi: float, space) -> Var:
    """Fitted cost regression minus psi times the mean cost value of OOD pairs."""
    inputs = np.hstack([batch["s"], encode_actions(space, batch["a"])])
    loss = _mse_loss_var(qc, params, inputs, targets)
    if ood_inputs is not None and psi != 0.0:
        ood_vals = ad.reshape(qc.forward_var(params, ood_inputs), (ood_inputs.shape[0],))
        loss = loss - psi * ad.vmean(ood_vals)
    return loss


def reward_critic_loss(q: Mlp, params: Var, batch: dict, targets: np.ndarray, space) -> Var:
    inputs = np.hstack([batch["s"], encode_actions(space, batch["a"])])
    return _mse_loss_var(q, params, inputs, targets)


def masked_policy_loss(policy, params: Var, obs: np.ndarray, q: Mlp, qc: Mlp,
                       threshold: float, space, eps: np.ndarray | None):
    """Negative masked reward value of on-policy actions (mask is stop-gradient).

    Returns (loss, mask) so callers can report how much of the batch was
    considered safe in-distribution.
    """
    if isinstance(policy, SoftmaxPolicy):
        probs, _ = policy.probs_and_logprobs_var(params, obs)
        q_all = critic_values_all_discrete(q, obs, space)
        qc_all = critic_values_all_discrete(qc, obs, space)
        mask = (qc_all < threshold).astype(np.float64)
        objective = ad.vmean(ad.vsum(probs * (mask * q_all), axis=1))
        return -1.0 * objective, mask
    a_var, _ = policy.reparam_var(params, obs, eps)
    mu, std = policy.mean_and_std(obs)
    a_sampled = np.tanh(mu + std * eps)
    mask = (critic_values(qc, obs, a_sampled, space) < threshold).astype(np.float64)
    q_in = ad.concat([ad.as_var(obs), a_var], axis=1)
    q_vals = ad.reshape(q.forward_var(Var(q.params), q_in), (obs.shape[0],))
    return -1.0 * ad.vmean(mask * q_vals), mask


def cpq_update_qc(batch, qc, qc_target, policy, sampler, cfg, space, opt, rng):
    """One gradient step on the penalized fitted cost objective."""
    if batch["s"].shape[0] == 0:
        raise ValueError("empty batch")
    gamma = cfg.gamma
    targets = batch["c"] + gamma * (1.0 - batch["done"]) * bellman_bootstrap(
        policy,
        batch["s2"],
        lambda o, a: critic_values(qc_target, o, a, space),
        0.0,
        cfg.bootstrap_samples,
        rng,
    )
    ood_inputs = None
    if cfg.psi != 0.0 and sampler is not None:
        if "idx" in batch:
            ood_actions, _ = sampler.pool_for(batch["idx"], cfg.n_ood, rng)
        else:
            ood_actions, _ = sampler.sample_batch(batch["s"], cfg.n_ood, rng)
        b, n = batch["s"].shape[0], cfg.n_ood
        tiled = np.repeat(batch["s"], n, axis=0)
        flat = ood_actions.reshape(b * n) if ood_actions.ndim == 2 else ood_actions.reshape(b * n, -1)
        ood_inputs = np.hstack([tiled, encode_actions(space, flat)])
    params = Var(qc.params)
    loss = cost_critic_loss(qc, params, batch, targets, ood_inputs, cfg.psi, space)
    loss.backward()
    qc.params = adam_step(opt, qc.params, params.grad)
    return float(loss.value)


def cpq_update_q(batch, q, qc, policy, cfg, space, opt, rng):
    """One gradient step on the indicator-masked fitted reward objective."""
    if batch["s"].shape[0] == 0:
        raise ValueError("empty batch")
    threshold = cfg.cost_indicator_threshold

    def masked_value(obs, actions):
        keep = critic_values(qc, obs, actions, space) < threshold
        return keep * critic_values(q, obs, actions, space)

    targets = batch["r"] + cfg.gamma * (1.0 - batch["done"]) * bellman_bootstrap(
        policy, batch["s2"], masked_value, 0.0, cfg.bootstrap_samples, rng
    )
    params = Var(q.params)
    loss = reward_critic_loss(q, params, batch, targets, space)
    loss.backward()
    q.params = adam_step(opt, q.params, params.grad)
    return float(loss.value)


def cpq_update_policy(batch, policy, q, qc, cfg, space, opt, rng):
    """One ascent step on masked on-policy reward value."""
    if batch["s"].shape[0] == 0:
        raise ValueError("empty batch")
    eps = None
    if isinstance(policy, GaussianPolicy):
        eps = rng.standard_normal((batch["s"].shape[0], policy.action_dim))
    params = Var(policy.params)
    loss, _ = masked_policy_loss(
        policy, params, batch["s"], q, qc, cfg.cost_indicator_threshold, space, eps
    )
    loss.backward()
    policy.params = adam_step(opt, policy.params, params.grad)
    return float(loss.value)


def pretrain(dataset: OfflineDataset, env_spec, cfg: CpqConfig, seed: int) -> CpqResult:
    """Run the offline stage end to end and return the pretrained networks."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    space = env_spec.action_space
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    hidden = list(cfg.hidden)
    obs_dim = env_spec.obs_dim
    critic_sizes = [obs_dim + action_enc_dim(space)] + hidden + [1]
    if hasattr(space, "n"):
        policy = SoftmaxPolicy.init_random([obs_dim] + hidden + [space.n], rng)
    else:
        policy = GaussianPolicy.init_random([obs_dim] + hidden + [space.dim], rng)
    q = Mlp.init_random(critic_sizes, rng)
    qc = Mlp.init_random(critic_sizes, rng)
    qc_target = qc.clone()

    cfg = cfg.resolve(env_spec)
    sampler = OodSampler(cfg.ood_k, cfg.ood_quantile).fit(dataset, space) if cfg.psi != 0 else None

    opt_q = AdamState(lr=cfg.q_lr)
    opt_qc = AdamState(lr=cfg.qc_lr)
    opt_pi = AdamState(lr=cfg.policy_lr)
    for step in range(cfg.update_count):
        batch = dataset.sample_batch(cfg.batch_size, rng)
        try:
            cpq_update_q(batch, q, qc, policy, cfg, space, opt_q, rng)
            cpq_update_qc(batch, qc, qc_target, policy, sampler, cfg, space, opt_qc, rng)
            cpq_update_policy(batch, policy, q, qc, cfg, space, opt_pi, rng)
        except DivergenceError as exc:
            raise DivergenceError(f"offline pretraining diverged at step {step}: {exc}") from exc
        soft_update(qc_target, qc, cfg.tau)
    return CpqResult(policy=policy, q=q, qc=qc, q_target=q.clone(), qc_target=qc_target)
