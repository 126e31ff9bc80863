"""Advantage-weighted offline RL in a frozen encoder's latent space.

Per training step: twin critics regress onto the one-step bootstrap target
y = r + gamma * (1 - terminal) * min(Q1, Q2) evaluated at a fresh policy
action; a single latent draw per state is decoded into an action a-hat,
weighted by exp(advantage / lambda) (detached), and the policy minimizes
the weighted L1 imitation loss |a - a-hat| with gradients flowing through
the encoder's inverse into the policy parameters only.

The latent-direct variant replaces dataset actions by their encodings and
runs the same loop directly in latent space, decoding only when acting in
the environment.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import flow as fl
from . import ioutil
from .envs import support_violation_rate
from .nets import MLP

logger = logging.getLogger(__name__)

AGENT_MAGIC = b"CNFA"
AGENT_VERSION = 1

LOGVAR_MIN = -10.0
LOGVAR_MAX = 2.0

SQUASH_MODES = ("tanh", "amp-tanh", "none")

# Both shipped envs clip actions to [-1,1]^da at execution, so the critics
# only ever need to score executable actions. Decoded policy samples are
# clipped at this box wherever they feed a Q input; without the clip an
# unbounded decode lets the critics extrapolate off the box and the
# bootstrap target can run away.
ACTION_BOX = 1.0


@dataclass
class AWACConfig:
    """Policy-optimization hyperparameters. Temperature, learning rate and
    network width default to the reference small-task configuration."""

    lambda_temp: float = 1.0 / 3.0
    gamma: float = 0.99
    lr: float = 3e-4
    hidden: int = 256
    depth: int = 3
    batch_size: int = 256
    steps: int = 50_000
    eval_interval: int = 1000
    eval_episodes: int = 10
    target_mode: str = "live"
    tau: float = 0.005
    squash: str = "tanh"
    amplitude: float = 1.0
    adv_clamp: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_temp <= 0:
            raise ValueError("lambda_temp must be > 0")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0,1)")
        if self.squash not in SQUASH_MODES:
            raise ValueError(f"squash must be one of {SQUASH_MODES}")
        if self.target_mode not in ("live", "polyak"):
            raise ValueError("target_mode must be 'live' or 'polyak'")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be > 0")


class LatentPolicy:
    """Gaussian latent policy: an MLP maps the state to (mu, log variance);
    samples are squashed per mode: tanh into (-1,1)^n, amplitude*tanh into
    (-amp, amp)^n, or left unbounded."""

    def __init__(self, state_dim: int, latent_dim: int, hidden: int, depth: int,
                 rng: np.random.Generator, squash: str = "tanh",
                 amplitude: float = 1.0):
        if squash not in SQUASH_MODES:
            raise ValueError(f"squash must be one of {SQUASH_MODES}")
        self.state_dim = state_dim
        self.latent_dim = latent_dim
        self.squash = squash
        self.amplitude = amplitude
        self.net = MLP(state_dim, 2 * latent_dim, hidden, depth, rng, "policy",
                       zero_init_output=True)

    def parameters(self):
        return self.net.parameters()

    def _heads(self, s: ad.Tensor, trainable: bool):
        h = self.net(s, trainable)
        d = self.latent_dim
        mu = ad.take_cols(h, np.arange(d))
        logvar = ad.clamp(ad.take_cols(h, np.arange(d, 2 * d)),
                          LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def _squash(self, g: ad.Tensor) -> ad.Tensor:
        # pre-clamp keeps float64 tanh strictly inside the open interval
        if self.squash == "tanh":
            return ad.tanh(ad.clamp(g, -fl._TANH_PRE_CLAMP, fl._TANH_PRE_CLAMP))
        if self.squash == "amp-tanh":
            return ad.mul(
                ad.tanh(ad.clamp(g, -fl._TANH_PRE_CLAMP, fl._TANH_PRE_CLAMP)),
                self.amplitude)
        return g

    def sample_t(self, s: ad.Tensor, eps: np.ndarray, trainable: bool = True) -> ad.Tensor:
        """Reparametrized draw: squash(mu + sigma * eps)."""
        mu, logvar = self._heads(s, trainable)
        sigma = ad.exp(ad.mul(logvar, 0.5))
        return self._squash(ad.add(mu, ad.mul(sigma, ad.Tensor(eps))))

    def mean_t(self, s: ad.Tensor, trainable: bool = False) -> ad.Tensor:
        mu, _ = self._heads(s, trainable)
        return self._squash(mu)

    def sample(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        eps = rng.standard_normal((s.shape[0], self.latent_dim))
        return self.sample_t(ad.Tensor(s), eps, trainable=False).data


class Critic:
    """Q-network on (state ++ action)."""

    def __init__(self, state_dim: int, action_dim: int, hidden: int, depth: int,
                 rng: np.random.Generator, name: str):
        self.net = MLP(state_dim + action_dim, 1, hidden, depth, rng, name)

    def parameters(self):
        return self.net.parameters()

    def q_t(self, s: ad.Tensor, a: ad.Tensor, trainable: bool = True) -> ad.Tensor:
        return ad.reshape(self.net(ad.concat_cols([s, a]), trainable), (-1,))

    def q(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self.q_t(ad.Tensor(np.atleast_2d(s)), ad.Tensor(np.atleast_2d(a)),
                        trainable=False).data


class TwinCritics:
    def __init__(self, state_dim: int, action_dim: int, hidden: int, depth: int,
                 rng: np.random.Generator):
        self.q1 = Critic(state_dim, action_dim, hidden, depth, rng, "q1")
        self.q2 = Critic(state_dim, action_dim, hidden, depth, rng, "q2")

    def parameters(self):
        return self.q1.parameters() + self.q2.parameters()

    def min_q(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.minimum(self.q1.q(s, a), self.q2.q(s, a))


class Agent:
    """Frozen encoder + latent policy + twin critics, with the config and
    bookkeeping needed to act, evaluate, and checkpoint."""

    def __init__(self, encoder, policy: LatentPolicy, critics: TwinCritics,
                 config: AWACConfig, latent_direct: bool = False, steps: int = 0):
        self.encoder = encoder
        self.policy = policy
        self.critics = critics
        self.config = config
        self.latent_direct = latent_direct
        self.steps = steps
        self.aborted = False
        self.flow_fingerprint = fl.flow_fingerprint(encoder)

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        s = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        st = ad.Tensor(s)
        if deterministic:
            z = self.policy.mean_t(st)
        else:
            eps = rng.standard_normal((s.shape[0], self.policy.latent_dim))
            z = self.policy.sample_t(st, eps, trainable=False)
        sd = st if getattr(self.encoder, "state_dim", 0) else None
        a = self.encoder.decode_t(z, sd, trainable=False)
        return a.data[0] if np.asarray(obs).ndim == 1 else a.data


def build_agent(encoder, state_dim: int, action_dim: int, config: AWACConfig,
                latent_direct: bool = False) -> Agent:
    rng = np.random.default_rng(config.seed)
    latent_dim = encoder.latent_dim
    critic_action_dim = latent_dim if latent_direct else action_dim
    policy = LatentPolicy(state_dim, latent_dim, config.hidden, config.depth,
                          rng, squash=config.squash, amplitude=config.amplitude)
    critics = TwinCritics(state_dim, critic_action_dim, config.hidden,
                          config.depth, rng)
    return Agent(encoder, policy, critics, config, latent_direct)


def _decode_policy_sample(agent: Agent, s_t: ad.Tensor, eps: np.ndarray,
                          trainable: bool) -> ad.Tensor:
    """Latent draw pushed through the frozen encoder (or used directly in
    the latent-direct variant)."""
    z = agent.policy.sample_t(s_t, eps, trainable)
    if agent.latent_direct:
        return z
    sd = s_t if getattr(agent.encoder, "state_dim", 0) else None
    return agent.encoder.decode_t(z, sd, trainable=False)


def critic_target(agent: Agent, rewards: np.ndarray, next_states: np.ndarray,
                  terminals: np.ndarray, rng: np.random.Generator,
                  targets: "TwinCritics | None" = None) -> np.ndarray:
    """y = r + gamma * (1 - terminal) * min_i Q_i(s', a'); a constant with
    no gradient. a' is a fresh policy sample decoded by the encoder and
    clipped to the executable action box."""
    cfg = agent.config
    s_t = ad.Tensor(next_states)
    eps = rng.standard_normal((next_states.shape[0], agent.policy.latent_dim))
    a_next = _decode_policy_sample(agent, s_t, eps, trainable=False).data
    a_next = np.clip(a_next, -ACTION_BOX, ACTION_BOX)
    q = (targets or agent.critics).min_q(next_states, a_next)
    return rewards + cfg.gamma * (1.0 - terminals.astype(np.float64)) * q


def critic_loss_t(critics: TwinCritics, states: np.ndarray, actions: np.ndarray,
                  y: np.ndarray, trainable: bool = True) -> ad.Tensor:
    s = ad.Tensor(states)
    a = ad.Tensor(actions)
    yt = ad.Tensor(y)
    d1 = ad.sub(critics.q1.q_t(s, a, trainable), yt)
    d2 = ad.sub(critics.q2.q_t(s, a, trainable), yt)
    return ad.add(ad.mean_all(ad.mul(d1, d1)), ad.mean_all(ad.mul(d2, d2)))


def _omega(agent: Agent, states: np.ndarray, actions: np.ndarray,
           a_hat: np.ndarray) -> np.ndarray:
    """exp(clamp(A/lambda)) with A = minQ(s,a) - minQ(s, a-hat); plain
    numpy, carries no gradient. a-hat is clipped to the executable box so
    the weight and the critics agree on what the sample would do."""
    cfg = agent.config
    a_exec = np.clip(a_hat, -ACTION_BOX, ACTION_BOX)
    adv = agent.critics.min_q(states, actions) - agent.critics.min_q(states, a_exec)
    scaled = adv / cfg.lambda_temp
    clipped_hi = int(np.sum(scaled > cfg.adv_clamp))
    if clipped_hi:
        # the clamp is a designed guard, hitting it is not anomalous
        logger.debug("advantage exponent clamped for %d samples", clipped_hi)
    return np.exp(np.clip(scaled, -cfg.adv_clamp, cfg.adv_clamp))


def advantage_weights(agent: Agent, states: np.ndarray, actions: np.ndarray,
                      eps: np.ndarray):
    """Weights plus the decoded sample they were computed from; the policy
    loss can reuse the same sample so weight and loss agree."""
    s_t = ad.Tensor(states)
    a_hat = _decode_policy_sample(agent, s_t, eps, trainable=False).data
    return _omega(agent, states, actions, a_hat), a_hat


def policy_loss_t(agent: Agent, states: np.ndarray, actions: np.ndarray,
                  omega: np.ndarray, eps: np.ndarray,
                  trainable: bool = True) -> ad.Tensor:
    """Mean over batch and action dims of omega * |a - a-hat|; gradients
    reach the policy through the encoder inverse; omega is constant."""
    s_t = ad.Tensor(states)
    a_hat = _decode_policy_sample(agent, s_t, eps, trainable)
    l1 = ad.absolute(ad.sub(ad.Tensor(actions), a_hat))
    return ad.mean_all(ad.mul(l1, ad.Tensor(omega[:, None])))


def evaluate(agent: Agent, env, episodes: int, rng: np.random.Generator,
             support_spec=None, deterministic: bool = False):
    """Rolls out the agent; returns mean return, per-episode returns, and
    the support-violation rate of every executed action (None without a
    declared support)."""
    returns = []
    acts = []
    for _ in range(episodes):
        state = env.reset(rng)
        total = 0.0
        done = False
        while not done:
            a = agent.act(state.obs, rng, deterministic=deterministic)
            acts.append(np.asarray(a, dtype=np.float64))
            state, r, done = env.step(state, a)
            total += r
        returns.append(total)
    rate = None
    if support_spec is not None and acts:
        rate = support_violation_rate(np.array(acts), support_spec)
    return float(np.mean(returns)), returns, rate


def train(dataset, encoder, config: AWACConfig, env=None, support_spec=None,
          latent_direct: bool = False, log_cb=None):
    """Offline training loop. Returns (agent, metrics) where metrics is a
    list of JSON-ready rows, one per train/eval logging event.

    The encoder is frozen: its parameters receive no gradient and are
    byte-identical before and after. Non-finite losses abort with the last
    good state retained on the agent.
    """
    states = dataset.states
    actions = dataset.actions
    if latent_direct:
        # replace dataset actions by their encodings once, up front
        z, _ = encoder.forward(actions, states)
        actions = z
    frozen_before = fl.flow_fingerprint(encoder)
    agent = build_agent(encoder, states.shape[1], dataset.actions.shape[1],
                        config, latent_direct=latent_direct)
    root = np.random.SeedSequence(config.seed)
    batch_rng, target_rng, weight_rng, eval_rng_seed = [
        np.random.default_rng(s) for s in root.spawn(4)
    ]
    opt_c = ad.Adam(agent.critics.parameters(), lr=config.lr)
    opt_p = ad.Adam(agent.policy.parameters(), lr=config.lr)
    targets = None
    if config.target_mode == "polyak":
        targets = copy.deepcopy(agent.critics)

    metrics = []

    def emit(row):
        metrics.append(row)
        if log_cb:
            log_cb(row)

    def run_eval(step):
        if env is None or config.eval_episodes < 1:
            return
        mean_ret, _, rate = evaluate(agent, env, config.eval_episodes,
                                     np.random.default_rng(
                                         eval_rng_seed.integers(2**63)),
                                     support_spec=support_spec)
        emit({"step": step, "event": "eval", "losses": None,
              "mean_return": mean_ret, "support_violation_rate": rate})

    def snapshot():
        return [p.value.copy()
                for p in agent.policy.parameters() + agent.critics.parameters()]

    def restore(snap):
        for p, v in zip(agent.policy.parameters() + agent.critics.parameters(),
                        snap):
            p.value[:] = v

    n = states.shape[0]
    last_good = snapshot()
    agent.aborted = False
    last_c = last_p = math.nan
    for step in range(1, config.steps + 1):
        idx = batch_rng.integers(0, n, size=min(config.batch_size, n))
        s_b, a_b = states[idx], actions[idx]
        r_b = dataset.rewards[idx]
        s2_b = dataset.next_states[idx]
        t_b = dataset.terminals[idx]

        y = critic_target(agent, r_b, s2_b, t_b, target_rng, targets=targets)
        with ad.Tape() as tape:
            c_loss = critic_loss_t(agent.critics, s_b, a_b, y)
            tape.backward(c_loss)
        opt_c.step()

        eps = weight_rng.standard_normal((s_b.shape[0], agent.policy.latent_dim))
        with ad.Tape() as tape:
            # one decode serves both the weights (detached) and the loss
            a_hat_t = _decode_policy_sample(agent, ad.Tensor(s_b), eps,
                                            trainable=True)
            omega = _omega(agent, s_b, a_b, a_hat_t.data)
            l1 = ad.absolute(ad.sub(ad.Tensor(a_b), a_hat_t))
            p_loss = ad.mean_all(ad.mul(l1, ad.Tensor(omega[:, None])))
            tape.backward(p_loss)
        opt_p.step()

        if targets is not None:
            for tp, lp in zip(targets.parameters(), agent.critics.parameters()):
                tp.value *= 1.0 - config.tau
                tp.value += config.tau * lp.value

        last_c, last_p = float(c_loss.data), float(p_loss.data)
        if not (math.isfinite(last_c) and math.isfinite(last_p)):
            logger.error(
                "non-finite loss at step %d (critic %s, policy %s); aborting "
                "with the last logged snapshot", step, last_c, last_p,
            )
            restore(last_good)
            agent.aborted = True
            emit({"step": step, "event": "abort",
                  "losses": {"critic": last_c, "policy": last_p},
                  "mean_return": None, "support_violation_rate": None})
            break
        if step % config.eval_interval == 0 or step == config.steps:
            last_good = snapshot()
            emit({"step": step, "event": "train",
                  "losses": {"critic": last_c, "policy": last_p,
                             "mean_weight": float(np.mean(omega))},
                  "mean_return": None, "support_violation_rate": None})
            run_eval(step)

    agent.steps = config.steps if not agent.aborted else metrics[-1]["step"]
    if fl.flow_fingerprint(encoder) != frozen_before:
        raise RuntimeError("encoder parameters changed during RL training")
    return agent, metrics


def train_latent_direct(dataset, encoder, config: AWACConfig, env=None,
                        support_spec=None, log_cb=None):
    return train(dataset, encoder, config, env=env, support_spec=support_spec,
                 latent_direct=True, log_cb=log_cb)


def save_agent(agent: Agent, path: str, flow_path: str | None = None,
               env_name: str | None = None):
    """CNFA container: JSON header (config, dims, frozen-encoder content
    hash, optional encoder file path and environment name) + policy and
    critic parameters as little-endian float64 in declaration order."""
    params = agent.policy.parameters() + agent.critics.parameters()
    payload = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes()
                       for p in params)
    header = {
        "kind": "agent",
        "config": asdict(agent.config),
        "state_dim": agent.policy.state_dim,
        "latent_dim": agent.policy.latent_dim,
        "critic_action_dim": agent.critics.q1.net.in_dim - agent.policy.state_dim,
        "latent_direct": agent.latent_direct,
        "steps": agent.steps,
        "flow_fingerprint": agent.flow_fingerprint,
        "flow_path": flow_path,
        "env_name": env_name,
        "payload_bytes": len(payload),
    }
    ioutil.atomic_write_bytes(
        path, ioutil.pack_container(AGENT_MAGIC, AGENT_VERSION, header, payload)
    )


def load_agent(path: str, encoder) -> Agent:
    with open(path, "rb") as f:
        data = f.read()
    header, payload = ioutil.unpack_container(data, AGENT_MAGIC, AGENT_VERSION)
    if header.get("kind") != "agent":
        raise ValueError(f"not an agent checkpoint: kind={header.get('kind')!r}")
    fp = fl.flow_fingerprint(encoder)
    if fp != header["flow_fingerprint"]:
        raise ValueError(
            "encoder mismatch: checkpoint references "
            f"{header['flow_fingerprint'][:12]}..., given encoder hashes to "
            f"{fp[:12]}..."
        )
    config = AWACConfig(**header["config"])
    agent = build_agent(encoder, header["state_dim"],
                        header["critic_action_dim"], config,
                        latent_direct=header["latent_direct"])
    agent.steps = header["steps"]
    params = agent.policy.parameters() + agent.critics.parameters()
    expected = sum(p.value.size for p in params) * 8
    if len(payload) != expected or header.get("payload_bytes") != len(payload):
        raise ValueError(
            f"agent checkpoint length mismatch: expected {expected} payload "
            f"bytes, header says {header.get('payload_bytes')}, file has "
            f"{len(payload)}"
        )
    ofs = 0
    for p in params:
        k = p.value.size * 8
        p.value[:] = np.frombuffer(payload[ofs : ofs + k], dtype="<f8").reshape(
            p.value.shape
        )
        ofs += k
    return agent


def agent_header(path: str) -> dict:
    """Read just the JSON header of an agent checkpoint."""
    with open(path, "rb") as f:
        data = f.read()
    header, _ = ioutil.unpack_container(data, AGENT_MAGIC, AGENT_VERSION)
    return header


def agent_flow_path(path: str) -> str | None:
    """Read just the referenced encoder path from an agent checkpoint."""
    return agent_header(path).get("flow_path")
