import copy
import math

import numpy as np
import pytest

from flowrl import autodiff as ad
from flowrl import envs
from flowrl import flow as fl
from flowrl import rl


def _identity_flow(state_dim=2):
    # two zero-init couplings, two reversals: the exact identity map
    return fl.ConditionalFlow(2, state_dim, 2, 8, base="normal",
                              tanh_output=False)


def _cnf_flow(state_dim=2, jitter=0.0, seed=0):
    f = fl.ConditionalFlow(2, state_dim, 2, 8, base="uniform", tanh_output=True)
    if jitter:
        rng = np.random.default_rng(seed)
        for p in f.parameters():
            p.value += rng.normal(0.0, jitter, p.value.shape)
    return f


def _small_cfg(**kw):
    base = dict(hidden=16, depth=2, batch_size=32, steps=10, eval_interval=5,
                eval_episodes=0, seed=0)
    base.update(kw)
    return rl.AWACConfig(**base)


def _pin_sigma(policy, value=-20.0):
    # force the log-variance head low so samples hug the mean
    w, b = policy.net._layers[-1]
    b.value[policy.latent_dim:] = value


def _dataset(n=64, seed=0):
    env = envs.PointNavEnv(cap=16)
    beh = envs.make_behavior("point-nav", "medium", env)
    return envs.generate_dataset(env, beh, n, seed=seed)


def test_config_validation():
    with pytest.raises(ValueError):
        rl.AWACConfig(lambda_temp=0.0)
    with pytest.raises(ValueError):
        rl.AWACConfig(gamma=1.0)
    with pytest.raises(ValueError):
        rl.AWACConfig(squash="sigmoid")
    with pytest.raises(ValueError):
        rl.AWACConfig(target_mode="ema")
    rl.AWACConfig(gamma=0.0)


def test_policy_zero_init_mean_is_zero_and_pinned_sigma_collapses_samples():
    rng = np.random.default_rng(0)
    pol = rl.LatentPolicy(2, 2, 16, 2, rng)
    s = np.zeros((4, 2))
    assert np.all(pol.mean_t(ad.Tensor(s)).data == 0.0)
    _pin_sigma(pol)
    draws = pol.sample(s, np.random.default_rng(1))
    assert np.max(np.abs(draws)) < 0.05


def test_tanh_squash_keeps_samples_strictly_inside_unit_box():
    rng = np.random.default_rng(2)
    pol = rl.LatentPolicy(2, 2, 16, 2, rng)
    for p in pol.parameters():
        p.value += np.random.default_rng(3).normal(0, 0.5, p.value.shape)
    s = np.random.default_rng(4).standard_normal((100_000, 2))
    z = pol.sample(s, np.random.default_rng(5))
    assert np.all(np.abs(z) < 1.0)


def test_amplitude_squash_widens_range():
    rng = np.random.default_rng(6)
    pol = rl.LatentPolicy(2, 2, 16, 2, rng, squash="amp-tanh", amplitude=2.0)
    w, b = pol.net._layers[-1]
    b.value[:2] = [3.0, -3.0]
    z = pol.sample(np.zeros((20_000, 2)), np.random.default_rng(7))
    assert np.all(np.abs(z) < 2.0)
    assert np.any(np.abs(z) > 1.0)


def test_unsquashed_mode_is_unbounded_gaussian():
    rng = np.random.default_rng(8)
    pol = rl.LatentPolicy(2, 2, 16, 2, rng, squash="none")
    z = pol.sample(np.zeros((50_000, 2)), np.random.default_rng(9))
    assert np.max(np.abs(z)) > 3.0


def test_act_composition_of_identities_is_zero():
    agent = rl.build_agent(_cnf_flow(), 2, 2, _small_cfg())
    a = agent.act(np.array([0.3, -0.2]), np.random.default_rng(0),
                  deterministic=True)
    assert np.allclose(a, 0.0, atol=1e-12)
    b = agent.act(np.array([0.3, -0.2]), np.random.default_rng(99),
                  deterministic=True)
    assert np.array_equal(a, b)


def test_critic_target_terminal_and_zero_discount():
    ds = _dataset()
    agent = rl.build_agent(_cnf_flow(), 2, 2, _small_cfg(gamma=0.0))
    y = rl.critic_target(agent, ds.rewards, ds.next_states, ds.terminals,
                         np.random.default_rng(0))
    assert np.array_equal(y, ds.rewards)

    agent2 = rl.build_agent(_cnf_flow(), 2, 2, _small_cfg(gamma=0.9))
    term = np.ones_like(ds.terminals)
    y2 = rl.critic_target(agent2, ds.rewards, ds.next_states, term,
                          np.random.default_rng(0))
    assert np.array_equal(y2, ds.rewards)


def _zero_output(net):
    w, b = net._layers[-1]
    w.value[:] = 0.0
    b.value[:] = 0.0


def test_critic_loss_zero_when_exact_and_offset_squared():
    ds = _dataset(16)
    agent = rl.build_agent(_cnf_flow(), 2, 2, _small_cfg())
    _zero_output(agent.critics.q1.net)
    _zero_output(agent.critics.q2.net)
    y = np.zeros(ds.n)
    loss = rl.critic_loss_t(agent.critics, ds.states, ds.actions, y,
                            trainable=False)
    assert float(loss.data) == 0.0

    delta = 0.37
    agent.critics.q1.net._layers[-1][1].value[:] = delta
    agent.critics.q2.net._layers[-1][1].value[:] = delta
    loss2 = rl.critic_loss_t(agent.critics, ds.states, ds.actions, y,
                             trainable=False)
    assert abs(float(loss2.data) - 2.0 * delta**2) < 1e-12


def test_critic_gradients_match_finite_differences():
    ds = _dataset(3)
    rng = np.random.default_rng(1)
    critics = rl.TwinCritics(2, 2, 4, 1, rng)
    y = np.array([0.1, -0.2, 0.3])

    def loss_fn():
        return rl.critic_loss_t(critics, ds.states[:3], ds.actions[:3], y)

    report = ad.grad_check(loss_fn, critics.parameters())
    assert report["ok"], report["failures"]


class _FakeCritics:
    """Closed-form stand-in: min Q(s,a) = first action coordinate."""

    def min_q(self, s, a):
        return np.atleast_2d(a)[:, 0].copy()


def test_advantage_weight_closed_forms():
    cfg = _small_cfg(lambda_temp=0.5)
    agent = rl.build_agent(_cnf_flow(), 2, 2, cfg)
    _pin_sigma(agent.policy)
    agent.critics = _FakeCritics()
    s = np.zeros((3, 2))
    eps = np.zeros((3, 2))
    # a-hat decodes to 0, so the advantage equals the first coordinate
    a = np.array([[0.0, 0.9], [0.5, 0.0], [-0.25, 0.1]])
    omega, a_hat = rl.advantage_weights(agent, s, a, eps)
    assert np.allclose(a_hat, 0.0, atol=1e-12)
    assert abs(omega[0] - 1.0) < 1e-12
    assert abs(omega[1] - math.e) < 1e-12
    assert abs(omega[2] - math.exp(-0.5)) < 1e-12


def test_advantage_weights_match_direct_evaluation_oracle():
    cfg = _small_cfg(lambda_temp=1 / 3)
    agent = rl.build_agent(_cnf_flow(jitter=0.1, seed=11), 2, 2, cfg)
    rng = np.random.default_rng(12)
    for p in agent.policy.parameters():
        p.value += rng.normal(0, 0.2, p.value.shape)
    agent.critics = _FakeCritics()
    s = rng.standard_normal((5, 2))
    a = rng.uniform(-1, 1, (5, 2))
    eps = rng.standard_normal((5, 2))
    omega, a_hat = rl.advantage_weights(agent, s, a, eps)
    # the weight scores the executable action, i.e. the decode clipped to
    # the env box, not the raw decode
    adv = a[:, 0] - np.clip(a_hat, -1.0, 1.0)[:, 0]
    expect = np.exp(np.clip(adv / cfg.lambda_temp, -20.0, 20.0))
    assert np.allclose(omega, expect, rtol=0, atol=1e-12)


def test_weights_stay_positive_under_extreme_advantages():
    cfg = _small_cfg(lambda_temp=1e-3)
    agent = rl.build_agent(_cnf_flow(), 2, 2, cfg)
    _pin_sigma(agent.policy)

    class Huge:
        def min_q(self, s, a):
            return -1e6 * np.abs(np.atleast_2d(a)[:, 0] - 0.5)

    agent.critics = Huge()
    omega, _ = rl.advantage_weights(agent, np.zeros((2, 2)),
                                    np.array([[0.9, 0.0], [0.4, 0.0]]),
                                    np.zeros((2, 2)))
    assert np.all(omega > 0.0)
    assert omega.max() <= math.exp(20.0)


def test_policy_loss_zero_cases_and_no_gradient_from_zero_weights():
    agent = rl.build_agent(_cnf_flow(), 2, 2, _small_cfg())
    s = np.zeros((4, 2))
    a = np.zeros((4, 2))
    eps = np.zeros((4, 2))
    loss = rl.policy_loss_t(agent, s, a, np.ones(4), eps, trainable=False)
    assert float(loss.data) == 0.0

    rng = np.random.default_rng(3)
    a2 = rng.uniform(-1, 1, (4, 2))
    with ad.Tape() as tape:
        loss2 = rl.policy_loss_t(agent, s, a2, np.zeros(4), eps)
        tape.backward(loss2)
    assert float(loss2.data) == 0.0
    assert all(np.all(p.grad == 0.0) for p in agent.policy.parameters())


def test_policy_gradients_through_flow_inverse():
    agent = rl.build_agent(_cnf_flow(jitter=0.1, seed=21), 2, 2,
                           _small_cfg(hidden=4, depth=1))
    rng = np.random.default_rng(22)
    for p in agent.policy.parameters():
        p.value += rng.normal(0, 0.1, p.value.shape)
    s = rng.standard_normal((3, 2))
    a = rng.uniform(-0.8, 0.8, (3, 2))
    eps = rng.standard_normal((3, 2))
    omega = rng.uniform(0.5, 2.0, 3)

    def loss_fn():
        return rl.policy_loss_t(agent, s, a, omega, eps)

    report = ad.grad_check(loss_fn, agent.policy.parameters())
    assert report["ok"], report["failures"]


def test_no_gradient_leakage_between_policy_and_critics():
    agent = rl.build_agent(_cnf_flow(jitter=0.05, seed=31), 2, 2, _small_cfg())
    rng = np.random.default_rng(32)
    s = rng.standard_normal((4, 2))
    a = rng.uniform(-1, 1, (4, 2))
    eps = rng.standard_normal((4, 2))
    omega = np.ones(4)
    with ad.Tape() as tape:
        tape.backward(rl.policy_loss_t(agent, s, a, omega, eps))
    assert all(np.all(p.grad == 0.0) for p in agent.critics.parameters())
    assert any(np.any(p.grad != 0.0) for p in agent.policy.parameters())

    for p in agent.policy.parameters() + agent.critics.parameters():
        p.zero_grad()
    y = rng.standard_normal(4)
    with ad.Tape() as tape:
        tape.backward(rl.critic_loss_t(agent.critics, s, a, y))
    assert all(np.all(p.grad == 0.0) for p in agent.policy.parameters())
    assert any(np.any(p.grad != 0.0) for p in agent.critics.parameters())


def test_swapping_critics_changes_nothing():
    agent = rl.build_agent(_cnf_flow(jitter=0.05, seed=41), 2, 2, _small_cfg())
    rng = np.random.default_rng(42)
    for p in agent.critics.parameters():
        p.value += rng.normal(0, 0.3, p.value.shape)
    ds = _dataset(16)
    eps = rng.standard_normal((16, 2))
    y1 = rl.critic_target(agent, ds.rewards[:16], ds.next_states[:16],
                          ds.terminals[:16], np.random.default_rng(7))
    w1, _ = rl.advantage_weights(agent, ds.states[:16], ds.actions[:16], eps)
    l1 = float(rl.critic_loss_t(agent.critics, ds.states[:16], ds.actions[:16],
                                y1, trainable=False).data)
    agent.critics.q1, agent.critics.q2 = agent.critics.q2, agent.critics.q1
    y2 = rl.critic_target(agent, ds.rewards[:16], ds.next_states[:16],
                          ds.terminals[:16], np.random.default_rng(7))
    w2, _ = rl.advantage_weights(agent, ds.states[:16], ds.actions[:16], eps)
    l2 = float(rl.critic_loss_t(agent.critics, ds.states[:16], ds.actions[:16],
                                y2, trainable=False).data)
    assert np.array_equal(y1, y2)
    assert np.array_equal(w1, w2)
    assert l1 == l2


def test_train_zero_steps_returns_initialization():
    ds = _dataset(64)
    f = _cnf_flow()
    cfg = _small_cfg(steps=0)
    agent, metrics = rl.train(ds, f, cfg)
    fresh = rl.build_agent(f, 2, 2, cfg)
    for p, q in zip(agent.policy.parameters() + agent.critics.parameters(),
                    fresh.policy.parameters() + fresh.critics.parameters()):
        assert np.array_equal(p.value, q.value)
    assert metrics == []
    assert agent.steps == 0


def test_train_determinism_and_frozen_encoder():
    ds = _dataset(128)

    def run():
        f = _cnf_flow(jitter=0.05, seed=51)
        before = fl.flow_fingerprint(f)
        env = envs.PointNavEnv(cap=16)
        agent, metrics = rl.train(ds, f, _small_cfg(steps=20, eval_interval=10,
                                                    eval_episodes=2), env=env)
        assert fl.flow_fingerprint(f) == before
        return agent, metrics

    a1, m1 = run()
    a2, m2 = run()
    assert m1 == m2
    for p, q in zip(a1.policy.parameters() + a1.critics.parameters(),
                    a2.policy.parameters() + a2.critics.parameters()):
        assert np.array_equal(p.value, q.value)
    assert any(r["event"] == "eval" for r in m1)
    for r in m1:
        if r["event"] == "train":
            assert set(r["losses"]) == {"critic", "policy", "mean_weight"}


def test_latent_direct_with_identity_flow_matches_plain_training():
    ds = _dataset(128)
    f = _identity_flow()
    z, _ = f.forward(ds.actions, ds.states)
    assert np.array_equal(z, ds.actions)
    cfg = _small_cfg(steps=25)
    agent_a, metrics_a = rl.train(ds, f, cfg)
    agent_b, metrics_b = rl.train_latent_direct(ds, f, cfg)
    assert metrics_a == metrics_b
    for p, q in zip(agent_a.policy.parameters() + agent_a.critics.parameters(),
                    agent_b.policy.parameters() + agent_b.critics.parameters()):
        assert np.array_equal(p.value, q.value)


def test_train_aborts_on_non_finite_loss_with_snapshot_restored():
    ds = _dataset(64)
    ds.rewards[:] = np.nan
    f = _cnf_flow()
    cfg = _small_cfg(steps=50, eval_interval=10)
    agent, metrics = rl.train(ds, f, cfg)
    assert agent.aborted
    assert metrics[-1]["event"] == "abort"
    fresh = rl.build_agent(f, 2, 2, cfg)
    for p, q in zip(agent.policy.parameters() + agent.critics.parameters(),
                    fresh.policy.parameters() + fresh.critics.parameters()):
        assert np.array_equal(p.value, q.value)


def test_polyak_mode_tracks_live_critics():
    ds = _dataset(128)
    f = _cnf_flow()
    cfg = _small_cfg(steps=30, target_mode="polyak", tau=0.5)
    agent, _ = rl.train(ds, f, cfg)
    assert agent.config.target_mode == "polyak"


def _chain_dataset(n=64):
    # two-state deterministic loop: s0 -(r=1)-> s1 -(r=0)-> s0; actions are
    # draws from the same near-deterministic policy used for bootstrapping,
    # so the critics see the action neighborhood they are evaluated on
    s0 = np.array([-0.5, 0.0])
    s1 = np.array([0.5, 0.0])
    rows = []
    for i in range(n):
        if i % 2 == 0:
            rows.append((s0, s1, 1.0))
        else:
            rows.append((s1, s0, 0.0))
    states = np.array([r[0] for r in rows])
    nxt = np.array([r[1] for r in rows])
    rewards = np.array([r[2] for r in rows])
    actions = math.exp(-5.0) * np.random.default_rng(123).standard_normal((n, 2))
    terminals = np.zeros(n, dtype=np.uint8)
    return envs.OfflineDataset(states, actions, rewards, nxt, terminals)


def _value_iteration_chain(gamma, iters=2000):
    q0 = q1 = 0.0
    for _ in range(iters):
        q0, q1 = 1.0 + gamma * q1, 0.0 + gamma * q0
    return q0, q1


def test_chain_mdp_critics_approach_value_iteration():
    # policy held fixed at the data action, critics bootstrap to the oracle
    gamma = 0.9
    ds = _chain_dataset()
    cfg = _small_cfg(hidden=32, depth=2, gamma=gamma, lr=1e-3)
    agent = rl.build_agent(_cnf_flow(), 2, 2, cfg)
    _pin_sigma(agent.policy)
    opt = ad.Adam(agent.critics.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(0)
    for _ in range(3000):
        y = rl.critic_target(agent, ds.rewards, ds.next_states, ds.terminals,
                             rng)
        with ad.Tape() as tape:
            tape.backward(rl.critic_loss_t(agent.critics, ds.states,
                                           ds.actions, y))
        opt.step()
    q0_star, q1_star = _value_iteration_chain(gamma)
    q0 = float(agent.critics.min_q(ds.states[:1], np.zeros((1, 2)))[0])
    q1 = float(agent.critics.min_q(ds.states[1:2], np.zeros((1, 2)))[0])
    assert abs(q0 - q0_star) < 0.05
    assert abs(q1 - q1_star) < 0.05


def test_agent_checkpoint_roundtrip(tmp_path):
    ds = _dataset(64)
    f = _cnf_flow(jitter=0.05, seed=61)
    agent, _ = rl.train(ds, f, _small_cfg(steps=15))
    path = str(tmp_path / "a.cnfa")
    rl.save_agent(agent, path, flow_path="enc.cnfm")
    back = rl.load_agent(path, f)
    for p, q in zip(agent.policy.parameters() + agent.critics.parameters(),
                    back.policy.parameters() + back.critics.parameters()):
        assert np.array_equal(p.value, q.value)
    assert back.config == agent.config
    assert back.steps == agent.steps
    assert rl.agent_flow_path(path) == "enc.cnfm"

    obs = np.array([0.1, 0.2])
    a1 = agent.act(obs, np.random.default_rng(5))
    a2 = back.act(obs, np.random.default_rng(5))
    assert np.array_equal(a1, a2)


def test_agent_checkpoint_rejects_wrong_encoder(tmp_path):
    ds = _dataset(32)
    f = _cnf_flow(jitter=0.05, seed=71)
    agent, _ = rl.train(ds, f, _small_cfg(steps=5))
    path = str(tmp_path / "a.cnfa")
    rl.save_agent(agent, path)
    other = _cnf_flow(jitter=0.05, seed=72)
    with pytest.raises(ValueError, match="mismatch"):
        rl.load_agent(path, other)


def test_evaluate_deterministic_given_seed():
    agent = rl.build_agent(_cnf_flow(jitter=0.05, seed=81), 2, 2, _small_cfg())
    env = envs.PointNavEnv(cap=10)
    r1, _, _ = rl.evaluate(agent, env, 5, np.random.default_rng(17))
    r2, _, _ = rl.evaluate(agent, env, 5, np.random.default_rng(17))
    assert r1 == r2


def test_evaluate_reports_support_violations():
    agent = rl.build_agent(_cnf_flow(), 2, 2, _small_cfg())
    env = envs.BanditEnv()
    spec = envs.SupportSpec.ring(0.4, 0.8)
    # identity agent acts at 0, violating the ring on every step
    mean_ret, _, rate = rl.evaluate(agent, env, 8, np.random.default_rng(0),
                                    support_spec=spec, deterministic=True)
    assert rate == 1.0
    assert abs(mean_ret - 0.0) < 1e-12
