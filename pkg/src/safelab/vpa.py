"""Value re-alignment of pretrained critics, plus rank-correlation diagnostics.

The offline stage trains critics against a penalized objective, so their
values are systematically off for the very policy they were trained with.
This stage re-fits both critics to entropy-augmented evaluation targets of
the frozen pretrained policy, using only the offline dataset: the reward
target adds an optimism bonus where the policy is uncertain, the cost
target adds the analogous pessimism bonus.

Alignment quality is measured by Spearman rank correlation between critic
predictions and Monte-Carlo ground-truth returns from probe state-action
pairs, reported before and after re-alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Var
from .envs import Environment, Transition, discounted_return
from .nets import DivergenceError, Mlp, AdamState, adam_step, critic_values, soft_update
from .offline import OfflineDataset, bellman_bootstrap, reward_critic_loss

__all__ = [
    "VpaConfig",
    "AlignmentReport",
    "vpa_q_target",
    "vpa_qc_target",
    "vpa_run",
    "spearman_rho",
    "mc_q_estimate",
    "alignment_scores",
    "alignment_report",
    "render_alignment_table",
    "alignment_reports_to_csv",
]


@dataclass
class VpaConfig:
    """Entropy coefficients and regression schedule for the alignment stage."""

    alpha: float = 1e-3  # reward-side entropy coefficient
    alpha_c: float = 5e-4  # cost-side entropy coefficient
    step_count: int = 2000
    batch_size: int = 256
    tau: float = 5e-2
    q_lr: float = 3e-5
    qc_lr: float = 8e-5
    gamma: float = 0.99
    bootstrap_samples: int = 1  # 0 = exact expectation (discrete only)

    def __post_init__(self):
        if self.alpha < 0 or self.alpha_c < 0:
            raise ValueError("entropy coefficients must be nonnegative")

    def resolve(self, env_spec) -> "VpaConfig":
        return replace(self, gamma=env_spec.discount)


@dataclass
class AlignmentReport:
    """Spearman correlations of critic predictions against MC ground truth."""

    rho_q_before: float
    rho_q_after: float
    rho_qc_before: float
    rho_qc_after: float
    mode: str  # "dataset" or "random"
    rollout_count: int
    probe_count: int
    degenerate: bool = False


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def _batch_targets(batch, policy, target_net, entropy_coef, gamma, m, rng, space):
    boot = bellman_bootstrap(
        policy,
        batch["s2"],
        lambda o, a: critic_values(target_net, o, a, space),
        entropy_coef,
        m,
        rng,
    )
    return gamma * (1.0 - batch["done"].astype(np.float64)) * boot


def vpa_q_target(
    transition: Transition, policy, q_target: Mlp, alpha: float, gamma: float,
    space, seed: int, m: int = 1,
) -> float:
    """Entropy-augmented evaluation target for one transition's reward critic."""
    batch = _single(transition)
    rng = np.random.default_rng(seed)
    return float(
        transition.r + _batch_targets(batch, policy, q_target, alpha, gamma, m, rng, space)[0]
    )


def vpa_qc_target(
    transition: Transition, policy, qc_target: Mlp, alpha_c: float, gamma: float,
    space, seed: int, m: int = 1,
) -> float:
    """Cost-side target; the entropy term raises it (pessimism on cost)."""
    batch = _single(transition)
    rng = np.random.default_rng(seed)
    return float(
        transition.c + _batch_targets(batch, policy, qc_target, alpha_c, gamma, m, rng, space)[0]
    )


def _single(tr: Transition) -> dict:
    a = np.array([tr.a]) if np.isscalar(tr.a) or isinstance(tr.a, (int,)) else np.asarray(tr.a)[None, :]
    return {
        "s": np.asarray(tr.s, dtype=np.float64)[None, :],
        "a": a,
        "r": np.array([tr.r]),
        "c": np.array([tr.c]),
        "s2": np.asarray(tr.s_next, dtype=np.float64)[None, :],
        "done": np.array([tr.done]),
    }


# ---------------------------------------------------------------------------
# the alignment loop
# ---------------------------------------------------------------------------


def vpa_run(
    dataset: OfflineDataset,
    policy,
    q: Mlp,
    qc: Mlp,
    q_target: Mlp,
    qc_target: Mlp,
    cfg: VpaConfig,
    space,
    seed: int,
):
    """Regress both critics toward frozen-policy evaluation targets.

    The policy is read-only throughout; targets are soft-updated each step.
    Returns the aligned (q, qc), mutated in place.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    opt_q = AdamState(lr=cfg.q_lr)
    opt_qc = AdamState(lr=cfg.qc_lr)
    m = cfg.bootstrap_samples
    for step in range(cfg.step_count):
        batch = dataset.sample_batch(cfg.batch_size, rng)
        y_q = batch["r"] + _batch_targets(
            batch, policy, q_target, cfg.alpha, cfg.gamma, m, rng, space
        )
        y_qc = batch["c"] + _batch_targets(
            batch, policy, qc_target, cfg.alpha_c, cfg.gamma, m, rng, space
        )
        try:
            for net, targets, opt in ((q, y_q, opt_q), (qc, y_qc, opt_qc)):
                params = Var(net.params)
                loss = reward_critic_loss(net, params, batch, targets, space)
                loss.backward()
                net.params = adam_step(opt, net.params, params.grad)
        except DivergenceError as exc:
            raise DivergenceError(f"alignment diverged at step {step}: {exc}") from exc
        soft_update(q_target, q, cfg.tau)
        soft_update(qc_target, qc, cfg.tau)
    return q, qc


# ---------------------------------------------------------------------------
# Spearman rank correlation
# ---------------------------------------------------------------------------


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0])
    sorted_x = x[order]
    i = 0
    while i < x.shape[0]:
        j = i
        while j + 1 < x.shape[0] and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs, ys) -> float:
    """Rank correlation with average ranks for ties.

    Without ties this equals 1 - 6 * sum(d_i^2) / (n (n^2 - 1)) for rank
    differences d_i; with ties it is the correlation of the rank vectors.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("inputs must be 1-D of equal length")
    n = xs.shape[0]
    if n < 2:
        raise ValueError("need at least two pairs")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    rx_c = rx - rx.mean()
    ry_c = ry - ry.mean()
    denom = np.sqrt((rx_c**2).sum() * (ry_c**2).sum())
    if denom == 0.0:
        raise ValueError("degenerate input: at least one list is constant")
    return float((rx_c * ry_c).sum() / denom)


# ---------------------------------------------------------------------------
# Monte-Carlo ground truth and reports
# ---------------------------------------------------------------------------


def mc_q_estimate(policy, env: Environment, state, action, gamma: float,
                  n_rollouts: int = 10, seed: int = 0):
    """Average discounted reward and cost of episodes forced through (s, a)."""
    q_sum = 0.0
    qc_sum = 0.0
    for i in range(n_rollouts):
        rollout_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        obs = env.inject_state(state, rollout_seed)
        pol_rng = np.random.default_rng(np.random.SeedSequence([rollout_seed, 1]))
        transitions = []
        a = action
        done = False
        while not done:
            obs, r, c, done = env.step(a)
            transitions.append((r, c))
            if not done:
                a = policy.act(obs, pol_rng)
        rs = np.array([t[0] for t in transitions])
        cs = np.array([t[1] for t in transitions])
        disc = np.power(gamma, np.arange(len(rs)))
        q_sum += float(rs @ disc)
        qc_sum += float(cs @ disc)
    return q_sum / n_rollouts, qc_sum / n_rollouts


def _probe_pairs(env: Environment, mode: str, count: int, rng: np.random.Generator,
                 dataset: OfflineDataset | None):
    pairs = []
    if mode == "dataset":
        if dataset is None or len(dataset) == 0:
            raise ValueError("dataset mode requires a nonempty dataset")
        idx = rng.integers(len(dataset), size=count)
        for i in idx:
            state = env.state_from_observation(dataset.s[i])
            a = dataset.a[i]
            pairs.append((state, int(a) if dataset.a.ndim == 1 else a.copy()))
    elif mode == "random":
        space = env.spec.action_space
        for _ in range(count):
            state = env.random_state(rng)
            if hasattr(space, "n"):
                a = int(rng.integers(space.n))
            else:
                a = rng.uniform(space.low, space.high, size=space.dim)
            pairs.append((state, a))
    else:
        raise ValueError(f"unknown probe mode {mode!r}")
    return pairs


def _predictions(env, q, qc, pairs, space):
    obs = np.array([np.asarray(env.inject_state(s, 0), dtype=np.float64) for s, _ in pairs])
    if hasattr(space, "n"):
        acts = np.array([a for _, a in pairs], dtype=np.intp)
    else:
        acts = np.array([a for _, a in pairs], dtype=np.float64)
    return critic_values(q, obs, acts, space), critic_values(qc, obs, acts, space)


def _probe_truth(policy, env: Environment, mode: str, count: int, seed: int,
                 dataset: OfflineDataset | None, n_rollouts: int):
    """Probe pairs plus their MC ground-truth (Q, Qc) estimates."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    pairs = _probe_pairs(env, mode, count, rng, dataset)
    truth_q = np.empty(count)
    truth_qc = np.empty(count)
    for i, (state, action) in enumerate(pairs):
        truth_q[i], truth_qc[i] = mc_q_estimate(
            policy, env, state, action, env.spec.discount, n_rollouts,
            seed=int(rng.integers(2**31)),
        )
    return pairs, truth_q, truth_qc


def _rho_pair(env, q, qc, pairs, truth_q, truth_qc):
    pred_q, pred_qc = _predictions(env, q, qc, pairs, env.spec.action_space)
    out = []
    degenerate = False
    for pred, truth in ((pred_q, truth_q), (pred_qc, truth_qc)):
        try:
            out.append(spearman_rho(pred, truth))
        except ValueError:
            out.append(0.0)
            degenerate = True
    return out[0], out[1], degenerate


def alignment_scores(policy, env: Environment, q: Mlp, qc: Mlp, mode: str,
                     count: int, seed: int, dataset: OfflineDataset | None = None,
                     n_rollouts: int = 10):
    """Spearman of critic predictions vs MC ground truth on probe pairs.

    Returns (rho_q, rho_qc, degenerate) where a degenerate (constant)
    prediction list is reported as rho 0 with the flag set.
    """
    if count < 2:
        raise ValueError("need at least two probe pairs")
    pairs, truth_q, truth_qc = _probe_truth(policy, env, mode, count, seed, dataset, n_rollouts)
    return _rho_pair(env, q, qc, pairs, truth_q, truth_qc)


def alignment_report(policy, env: Environment, before, after, mode: str, count: int,
                     seed: int, dataset: OfflineDataset | None = None,
                     n_rollouts: int = 10) -> AlignmentReport:
    """Before/after report over one shared probe set.

    ``before`` and ``after`` are (q, qc) pairs scored against the same probe
    pairs and the same MC rollouts.
    """
    if count < 2:
        raise ValueError("need at least two probe pairs")
    pairs, truth_q, truth_qc = _probe_truth(policy, env, mode, count, seed, dataset, n_rollouts)
    rq_b, rqc_b, d1 = _rho_pair(env, before[0], before[1], pairs, truth_q, truth_qc)
    rq_a, rqc_a, d2 = _rho_pair(env, after[0], after[1], pairs, truth_q, truth_qc)
    return AlignmentReport(
        rho_q_before=rq_b,
        rho_q_after=rq_a,
        rho_qc_before=rqc_b,
        rho_qc_after=rqc_a,
        mode=mode,
        rollout_count=n_rollouts,
        probe_count=count,
        degenerate=d1 or d2,
    )


def render_alignment_table(reports: dict) -> str:
    """Text table in the two-mode layout: env columns split random/dataset.

    ``reports`` maps an environment label to {"random": AlignmentReport,
    "dataset": AlignmentReport}; either mode may be missing.
    """
    labels = list(reports)
    header1 = f"{'':10s}{'VPA':>8s}"
    header2 = f"{'':10s}{'':8s}"
    for label in labels:
        header1 += f"{label:>22s}"
        header2 += f"{'random':>11s}{'dataset':>11s}"
    lines = [header1, header2]

    def cell(label, mode, attr):
        rep = reports[label].get(mode)
        return f"{getattr(rep, attr):11.4f}" if rep is not None else f"{'-':>11s}"

    for metric, prefix in (("q", "Q-value"), ("qc", "Qc-value")):
        for phase in ("before", "after"):
            row = f"{prefix if phase == 'before' else '':10s}{phase:>8s}"
            for label in labels:
                row += cell(label, "random", f"rho_{metric}_{phase}")
                row += cell(label, "dataset", f"rho_{metric}_{phase}")
            lines.append(row)
    return "\n".join(lines)


def alignment_reports_to_csv(reports: dict, path) -> None:
    lines = ["env,mode,metric,before,after,rollouts,probes,degenerate"]
    for label, by_mode in reports.items():
        for mode, rep in by_mode.items():
            if rep is None:
                continue
            for metric in ("q", "qc"):
                lines.append(
                    ",".join(
                        [
                            label,
                            mode,
                            metric,
                            repr(getattr(rep, f"rho_{metric}_before")),
                            repr(getattr(rep, f"rho_{metric}_after")),
                            str(rep.rollout_count),
                            str(rep.probe_count),
                            str(int(rep.degenerate)),
                        ]
                    )
                )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
