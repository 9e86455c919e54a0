"""Offline stage: datasets, OOD labeling, and conservative-update contracts."""

import numpy as np
import pytest

from safelab.autodiff import Var
from safelab.envs import (
    BoxSpace,
    DiscreteSpace,
    GridCircleWorld,
    GridRingPolicy,
    RandomPolicy,
)
from safelab.nets import AdamState, Mlp, SoftmaxPolicy, GaussianPolicy, critic_values
from safelab.offline import (
    CpqConfig,
    DatasetFormatError,
    OfflineDataset,
    OodSampler,
    bellman_bootstrap,
    cost_critic_loss,
    cpq_update_policy,
    cpq_update_q,
    cpq_update_qc,
    generate_dataset,
    load_dataset,
    masked_policy_loss,
    ood_sample,
    pretrain,
    reward_critic_loss,
    save_dataset,
)

from helpers import finite_diff, rel_err, random_batch


def small_grid_dataset(size=800, seed=5):
    env = GridCircleWorld(n=5, episode_length=40)
    mix = [(GridRingPolicy(env, noise=0.3), 0.5), (RandomPolicy(env.spec.action_space), 0.5)]
    return env, generate_dataset(env, mix, size, seed)


# ---------------------------------------------------------------------------
# dataset generation and serialization
# ---------------------------------------------------------------------------


def test_random_grid_dataset_mostly_zero_cost():
    env = GridCircleWorld()
    ds = generate_dataset(env, [(RandomPolicy(env.spec.action_space), 1.0)], 10_000, seed=0)
    assert ds.zero_cost_fraction() > 0.5


def test_generate_dataset_rejects_bad_inputs():
    env = GridCircleWorld(n=5)
    pol = RandomPolicy(env.spec.action_space)
    with pytest.raises(ValueError):
        generate_dataset(env, [(pol, 1.0)], 0, seed=0)
    with pytest.raises(ValueError):
        generate_dataset(env, [(pol, 0.4)], 10, seed=0)


def test_dataset_deterministic_and_roundtrip(tmp_path):
    env, ds = small_grid_dataset()
    _, ds2 = small_grid_dataset()
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(ds, p1)
    save_dataset(ds2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = load_dataset(p1)
    assert np.array_equal(loaded.s, ds.s)
    assert np.array_equal(loaded.a, ds.a)
    assert np.array_equal(loaded.r, ds.r)
    assert np.array_equal(loaded.c, ds.c)
    assert np.array_equal(loaded.s2, ds.s2)
    assert np.array_equal(loaded.done, ds.done)
    assert loaded.meta() == ds.meta()


def test_load_truncated_file_names_line(tmp_path):
    env, ds = small_grid_dataset(size=50)
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().split("\n")
    broken = "\n".join(lines[:20]) + "\n" + lines[20][: len(lines[20]) // 2]
    path.write_text(broken)
    with pytest.raises(DatasetFormatError, match="line 21"):
        load_dataset(path)


def test_load_size_mismatch_detected(tmp_path):
    env, ds = small_grid_dataset(size=50)
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().strip().split("\n")
    path.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(DatasetFormatError, match="size"):
        load_dataset(path)


def test_handwritten_two_line_fixture(tmp_path):
    path = tmp_path / "tiny.jsonl"
    path.write_text(
        '{"meta": {"env_name": "toy", "behavior": "hand", "size": 2, '
        '"zero_cost_fraction": 0.5, "seed": 3}}\n'
        '{"s": [0.0, 1.0], "a": 2, "r": 0.25, "c": 0.0, "s2": [1.0, 0.0], "done": false}\n'
        '{"s": [1.0, 0.0], "a": 0, "r": 0.0, "c": 1.0, "s2": [0.0, 1.0], "done": true}\n'
    )
    ds = load_dataset(path)
    assert len(ds) == 2
    t0 = ds.transition(0)
    assert t0.a == 2 and t0.r == 0.25 and t0.c == 0.0 and not t0.done
    t1 = ds.transition(1)
    assert np.array_equal(t1.s, [1.0, 0.0]) and t1.done


# ---------------------------------------------------------------------------
# OOD sampler
# ---------------------------------------------------------------------------


def make_dataset(s, a, space, seed=0):
    n = s.shape[0]
    return OfflineDataset(
        s=s, a=a, r=np.zeros(n), c=np.zeros(n), s2=s.copy(),
        done=np.zeros(n, dtype=bool), env_name="toy", behavior="hand", seed=seed,
    )


def test_ood_full_coverage_warning_path():
    # every action appears k times at the only state: nothing is OOD
    space = DiscreteSpace(4)
    s = np.tile(np.array([[1.0, 0.0]]), (20, 1))
    a = np.tile(np.arange(4), 5)
    sampler = OodSampler(k=5, quantile=0.95).fit(make_dataset(s, a, space), space)
    actions, warning = ood_sample(sampler, np.array([1.0, 0.0]), 3, seed=0)
    assert warning
    assert len(actions) == 3


def test_ood_singleton_support_flags_everything_else():
    space = DiscreteSpace(4)
    s = np.tile(np.array([[1.0, 0.0], [0.0, 1.0]]), (10, 1))
    a = np.zeros(20, dtype=np.intp)  # only action 0 anywhere
    sampler = OodSampler(k=5, quantile=0.95).fit(make_dataset(s, a, space), space)
    obs = np.tile(np.array([[1.0, 0.0]]), (3, 1))
    assert not sampler.is_ood(obs[:1], np.array([0]))[0]
    assert np.all(sampler.is_ood(obs, np.array([1, 2, 3])))
    actions, warning = ood_sample(sampler, np.array([1.0, 0.0]), 8, seed=1)
    assert not warning
    assert np.all(actions != 0)


def test_ood_continuous_quantile_radius():
    rng = np.random.default_rng(0)
    space = BoxSpace(1)
    s = rng.normal(0, 0.05, size=(400, 1))
    a = rng.normal(0, 0.05, size=(400, 1))  # actions clustered near 0
    sampler = OodSampler(k=5, quantile=0.95).fit(make_dataset(s, a, space), space)
    obs = np.zeros((1, 1))
    actions, warning = ood_sample(sampler, np.zeros(1), 16, seed=2)
    assert not warning
    dists = sampler.knn_distance(np.tile(obs, (16, 1)), actions)
    assert np.all(dists > sampler.threshold)
    assert np.all(np.abs(actions) > sampler.threshold * 0.5)


def test_ood_pools_match_fresh_labels():
    env, ds = small_grid_dataset()
    space = env.spec.action_space
    sampler = OodSampler(k=5, quantile=0.95).fit(ds, space)
    rng = np.random.default_rng(3)
    idx = rng.integers(len(ds), size=64)
    acts, warn = sampler.pool_for(idx, 4, rng)
    flat_obs = np.repeat(ds.s[idx], 4, axis=0)
    flags = sampler.is_ood(flat_obs, acts.reshape(-1))
    assert np.all(flags.reshape(64, 4)[~warn])


# ---------------------------------------------------------------------------
# conservative update contracts
# ---------------------------------------------------------------------------


def discrete_setup(seed=0, n=16):
    rng = np.random.default_rng(seed)
    space = DiscreteSpace(3)
    obs_dim = 4
    batch = random_batch(rng, n, obs_dim, space)
    policy = SoftmaxPolicy.init_random([obs_dim, 6, 3], rng)
    q = Mlp.init_random([obs_dim + 3, 6, 1], rng)
    qc = Mlp.init_random([obs_dim + 3, 6, 1], rng)
    return rng, space, batch, policy, q, qc


def test_qc_target_gamma_zero_is_cost():
    rng, space, batch, policy, q, qc = discrete_setup()
    cfg = CpqConfig(psi=0.0, gamma=0.0, bootstrap_samples=0, cost_indicator_threshold=1.0)
    boot = bellman_bootstrap(
        policy, batch["s2"], lambda o, a: critic_values(qc, o, a, space), 0.0, 0, rng
    )
    targets = batch["c"] + cfg.gamma * (1 - batch["done"]) * boot
    assert np.allclose(targets, batch["c"])


def test_penalty_off_reduces_to_fitted_cost_evaluation():
    # psi = 0 must give exactly the alignment-stage cost gradient at alpha_c = 0
    rng, space, batch, policy, q, qc = discrete_setup(1)
    qc_target = qc.clone()
    boot = bellman_bootstrap(
        policy, batch["s2"], lambda o, a: critic_values(qc_target, o, a, space), 0.0, 0, rng
    )
    targets = batch["c"] + 0.9 * (1 - batch["done"]) * boot
    pv1 = Var(qc.params)
    loss1 = cost_critic_loss(qc, pv1, batch, targets, None, 0.0, space)
    loss1.backward()
    batch_c = dict(batch)
    batch_c["r"] = batch["c"]
    pv2 = Var(qc.params)
    loss2 = reward_critic_loss(qc, pv2, batch_c, targets, space)
    loss2.backward()
    assert np.abs(pv1.grad - pv2.grad).max() < 1e-10


def test_cpq_q_target_masking_cases():
    rng, space, batch, policy, q, qc = discrete_setup(2)
    gamma = 0.9

    def masked_value(th):
        def f(o, a):
            keep = critic_values(qc, o, a, space) < th
            return keep * critic_values(q, o, a, space)
        return f

    # threshold below everything: bootstrap vanishes, target is exactly r
    low = bellman_bootstrap(policy, batch["s2"], masked_value(-1e9), 0.0, 0, rng)
    t_low = batch["r"] + gamma * (1 - batch["done"]) * low
    assert np.allclose(t_low, batch["r"])
    # threshold at infinity: plain fitted evaluation
    hi = bellman_bootstrap(policy, batch["s2"], masked_value(np.inf), 0.0, 0, rng)
    plain = bellman_bootstrap(
        policy, batch["s2"], lambda o, a: critic_values(q, o, a, space), 0.0, 0, rng
    )
    assert np.abs(hi - plain).max() < 1e-12


def test_cpq_q_mixed_mask_matches_per_sample_oracle():
    rng, space, batch, policy, q, qc = discrete_setup(3)
    threshold = float(np.median(critic_values(qc, batch["s2"], np.zeros(16, dtype=np.intp), space)))
    got = bellman_bootstrap(
        policy,
        batch["s2"],
        lambda o, a: (critic_values(qc, o, a, space) < threshold)
        * critic_values(q, o, a, space),
        0.0,
        0,
        rng,
    )
    probs = policy.probs(batch["s2"])
    want = np.zeros(16)
    for i in range(16):
        for a in range(3):
            qv = critic_values(q, batch["s2"][i : i + 1], np.array([a]), space)[0]
            qcv = critic_values(qc, batch["s2"][i : i + 1], np.array([a]), space)[0]
            want[i] += probs[i, a] * (qv if qcv < threshold else 0.0)
    assert np.abs(got - want).max() < 1e-12


def test_cpq_qc_loss_gradient_finite_differences():
    rng, space, batch, policy, q, qc = discrete_setup(4)
    qc_target = qc.clone()
    boot = bellman_bootstrap(
        policy, batch["s2"], lambda o, a: critic_values(qc_target, o, a, space), 0.0, 0, rng
    )
    targets = batch["c"] + 0.9 * (1 - batch["done"]) * boot
    ood_inputs = rng.normal(size=(24, 7))
    psi = 0.7

    def loss_value(params):
        net = Mlp(qc.layer_sizes, params)
        pv = Var(params)
        return float(cost_critic_loss(net, pv, batch, targets, ood_inputs, psi, space).value)

    pv = Var(qc.params)
    loss = cost_critic_loss(qc, pv, batch, targets, ood_inputs, psi, space)
    loss.backward()
    fd = finite_diff(loss_value, qc.params)
    assert rel_err(pv.grad, fd).max() < 1e-4


def test_cpq_policy_all_masked_leaves_policy_unchanged():
    rng, space, batch, policy, q, qc = discrete_setup(5)
    before = policy.params.copy()
    cfg = CpqConfig(psi=0.0, gamma=0.9, cost_indicator_threshold=-1e9, bootstrap_samples=0)
    opt = AdamState(lr=0.05)
    cpq_update_policy(batch, policy, q, qc, cfg, space, opt, rng)
    assert np.array_equal(policy.params, before)


def test_cpq_policy_mask_off_matches_sac_gradient():
    # indicator always 1: the ascent direction equals the actor gradient at
    # zero multiplier and zero entropy
    from safelab.online import sac_policy_loss

    rng, space, batch, policy, q, qc = discrete_setup(6)
    pv1 = Var(policy.params)
    loss1, _ = masked_policy_loss(policy, pv1, batch["s"], q, qc, np.inf, space, None)
    loss1.backward()
    pv2 = Var(policy.params)
    loss2 = sac_policy_loss(policy, pv2, batch["s"], q, qc, 0.0, 0.0, space, None)
    loss2.backward()
    assert np.abs(pv1.grad - pv2.grad).max() < 1e-10


def test_cpq_policy_gradient_finite_differences_continuous():
    rng = np.random.default_rng(7)
    space = BoxSpace(2)
    obs_dim = 3
    batch = random_batch(rng, 12, obs_dim, space)
    policy = GaussianPolicy.init_random([obs_dim, 5, 2], rng)
    q = Mlp.init_random([obs_dim + 2, 5, 1], rng)
    qc = Mlp.init_random([obs_dim + 2, 5, 1], rng)
    eps = rng.standard_normal((12, 2))
    mu, std = policy.mean_and_std(batch["s"])
    a0 = np.tanh(mu + std * eps)
    mask = (critic_values(qc, batch["s"], a0, space) < 0.0).astype(np.float64)
    if mask.sum() == 0:
        mask[:] = 1.0

    import safelab.autodiff as ad

    def loss_value(params):
        pol = GaussianPolicy(policy.layer_sizes, params)
        pv = Var(params)
        a_var, _ = pol.reparam_var(pv, batch["s"], eps)
        q_in = ad.concat([ad.as_var(batch["s"]), a_var], axis=1)
        q_vals = ad.reshape(q.forward_var(Var(q.params), q_in), (12,))
        return float((-1.0 * ad.vmean(q_vals * mask)).value)

    pv = Var(policy.params)
    a_var, _ = policy.reparam_var(pv, batch["s"], eps)
    q_in = ad.concat([ad.as_var(batch["s"]), a_var], axis=1)
    q_vals = ad.reshape(q.forward_var(Var(q.params), q_in), (12,))
    (-1.0 * ad.vmean(q_vals * mask)).backward()
    fd = finite_diff(loss_value, policy.params)
    assert rel_err(pv.grad, fd).max() < 1e-3


def test_empty_batch_rejected():
    rng, space, batch, policy, q, qc = discrete_setup(8)
    empty = {k: v[:0] for k, v in batch.items()}
    cfg = CpqConfig(gamma=0.9, cost_indicator_threshold=1.0, bootstrap_samples=0)
    with pytest.raises(ValueError):
        cpq_update_q(empty, q, qc, policy, cfg, space, AdamState(lr=0.1), rng)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def test_pretrain_zero_steps_returns_initial_networks():
    env, ds = small_grid_dataset()
    cfg = CpqConfig(update_count=0, hidden=(8, 8), bootstrap_samples=0)
    r1 = pretrain(ds, env.spec, cfg, seed=9)
    r2 = pretrain(ds, env.spec, cfg, seed=9)
    assert np.array_equal(r1.policy.params, r2.policy.params)
    assert np.array_equal(r1.q.params, r2.q.params)
    # initialization only: policy equals a fresh draw from the same stream
    rng = np.random.default_rng(np.random.SeedSequence([9, 21]))
    fresh = SoftmaxPolicy.init_random([env.spec.obs_dim, 8, 8, 4], rng)
    assert np.array_equal(r1.policy.params, fresh.params)


def test_pretrain_deterministic_across_runs():
    env, ds = small_grid_dataset(size=600)
    cfg = CpqConfig(update_count=40, batch_size=32, hidden=(8, 8), bootstrap_samples=0, n_ood=2)
    r1 = pretrain(ds, env.spec, cfg, seed=3)
    r2 = pretrain(ds, env.spec, cfg, seed=3)
    for name in ("policy", "q", "qc", "q_target", "qc_target"):
        assert np.array_equal(getattr(r1, name).params, getattr(r2, name).params)


def test_pretrain_inflates_ood_cost_estimates():
    # conservatism: after pretraining with psi > 0, mean cost prediction on
    # OOD pairs exceeds the mean on in-distribution pairs
    env, ds = small_grid_dataset(size=1500, seed=11)
    cfg = CpqConfig(
        update_count=400, batch_size=64, hidden=(16, 16), bootstrap_samples=0, n_ood=4, psi=2.0
    )
    result = pretrain(ds, env.spec, cfg, seed=1)
    space = env.spec.action_space
    sampler = OodSampler(cfg.ood_k, cfg.ood_quantile).fit(ds, space)
    rng = np.random.default_rng(0)
    idx = rng.integers(len(ds), size=256)
    in_dist = critic_values(result.qc, ds.s[idx], ds.a[idx], space)
    ood_actions, warn = sampler.pool_for(idx, 1, rng)
    ood = critic_values(result.qc, ds.s[idx], ood_actions[:, 0], space)
    keep = ~warn
    assert ood[keep].mean() >= in_dist[keep].mean()
