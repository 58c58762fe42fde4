"""Barrier-insertion environment, replay memory, and DQN / DDPG training."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import (ConvergenceError, Protocol, default_micro_steps, final_occupations,
                       spline_build, sweep_protocol)
from .neural import (AdamState, Gradients, NetworkParams, NonFiniteError, adam_step, backward,
                     forward, init_network, mse_loss, soft_update)
from .spectrum import DEFAULT_N_BASIS, E0, SpbGeometry, SpectrumError

log = logging.getLogger(__name__)

# alpha-dot choices in E0L per unit time, ascending; the index is the Q output
ACTIONS = np.array(sorted([-(2.0 ** n) for n in range(1, 11)] + [2.0 ** n for n in range(1, 11)]))
ACTION_BOUND = 1000.0       # continuous |alpha-dot| limit, E0L per unit time
OUT_OF_RANGE_REWARD = -10.0
TERMINAL_SCALE = 100.0


class EpisodeDiscarded(RuntimeError):
    """The terminal propagation failed, so the episode has no valid reward."""


@dataclass(frozen=True)
class TrainingConfig:
    T: float = 5.0
    n_t: int = 10
    alpha_max: float = 800.0            # E0L
    sigma: float = 0.05
    gamma: float = 0.99
    lr: float = 1e-3
    tau: float = 1e-3
    episodes: int = 2000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.8           # share of episodes over which epsilon anneals
    noise_start: float = 0.3            # DDPG noise std as a fraction of ACTION_BOUND
    noise_end: float = 1e-4
    batch: int = 32
    warmup: int = 500
    replay_fraction: float = 0.2        # capacity as a share of episodes * n_t
    d_values: tuple[float, ...] = (0.02,)
    box_width: float = 1.0
    hidden: tuple[int, ...] = (24, 48, 24)
    n_micro_train: int | None = None    # default 100 per unit time (500 for T = 5)
    n_micro_report: int | None = None   # default "report" tier
    n_basis: int = DEFAULT_N_BASIS
    eval_every: int = 10                # greedy evaluation interval, episodes
    updates_per_step: int = 4           # gradient steps per environment step, fresh batch each
    seed: int = 0

    def __post_init__(self):
        positive = ("T", "n_t", "alpha_max", "sigma", "lr", "episodes", "batch", "updates_per_step")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.gamma <= 1 or not 0 <= self.tau <= 1:
            raise ValueError("gamma and tau must lie in [0, 1]")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 0 <= self.noise_end <= self.noise_start:
            raise ValueError("need 0 <= noise_end <= noise_start")
        if not self.d_values:
            raise ValueError("d_values must not be empty")
        object.__setattr__(self, "d_values", tuple(float(d) for d in self.d_values))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for d in self.d_values:
            if not 0 <= d < self.box_width / 2:
                raise SpectrumError(f"offset d={d} outside [0, L/2)")

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def capacity(self) -> int:
        return max(self.batch, int(self.replay_fraction * self.episodes * self.n_t))

    @property
    def train_micro(self) -> int:
        return self.n_micro_train or max(1, int(math.ceil(100 * self.T)))

    @property
    def report_micro(self) -> int:
        return self.n_micro_report or default_micro_steps(self.T, "report")

    def epsilon(self, episode: int) -> float:
        span = self.eps_fraction * self.episodes
        frac = min(1.0, episode / span) if span > 0 else 1.0
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    def noise(self, episode: int) -> float:
        frac = episode / (self.episodes - 1) if self.episodes > 1 else 1.0
        return self.noise_start + (self.noise_end - self.noise_start) * frac

    def to_dict(self) -> dict:
        return asdict(self)


# --- environment ------------------------------------------------------------

@dataclass(frozen=True)
class EnvState:
    alpha: float                # E0L
    t: float
    k: int
    d: float
    knots: tuple[tuple[float, float], ...] = ((0.0, 0.0),)

    def observation(self, config: TrainingConfig) -> np.ndarray:
        return np.array([self.alpha / config.alpha_max, self.t / config.T])


def env_reset(config: TrainingConfig, rng: np.random.Generator) -> EnvState:
    d = config.d_values[int(rng.integers(len(config.d_values)))]
    return EnvState(0.0, 0.0, 0, d)


def knots_protocol(knots) -> Protocol:
    """Natural spline through (t, alpha / E0L) knots, in energy-length units."""
    return spline_build((t, a * E0) for t, a in knots)


def terminal_reward(occ, sigma: float) -> float:
    occ = np.asarray(occ)
    return float(TERMINAL_SCALE * np.exp(-((occ[0] - 0.5) ** 2 + (occ[1] - 0.5) ** 2) / sigma))


def episode_occupations(knots, d: float, config: TrainingConfig, n_micro: int | None = None):
    proto = knots_protocol(knots)
    return final_occupations(proto, SpbGeometry(config.box_width, d),
                             n_micro or config.train_micro, config.n_basis)


def env_step(state: EnvState, action: float, config: TrainingConfig
             ) -> tuple[EnvState, float, bool]:
    """Advance one control interval with alpha-dot ``action`` (E0L per unit time)."""
    if state.k >= config.n_t:
        raise ValueError("episode already finished")
    raw = state.alpha + float(action) * config.dt
    alpha = min(max(raw, 0.0), config.alpha_max)
    k = state.k + 1
    t = config.T if k == config.n_t else k * config.dt
    nxt = EnvState(alpha, t, k, state.d, state.knots + ((t, alpha),))
    if k < config.n_t:
        return nxt, (0.0 if raw == alpha else OUT_OF_RANGE_REWARD), False
    try:
        occ = episode_occupations(nxt.knots, state.d, config)
    except (ConvergenceError, SpectrumError) as exc:
        raise EpisodeDiscarded(f"terminal propagation failed at d={state.d}: {exc}") from exc
    return nxt, terminal_reward(occ, config.sigma), True


# --- replay memory ----------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring buffer of (s, a, r, s', done); oldest entries are overwritten."""

    def __init__(self, capacity: int, state_dim: int = 2, action_dim: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, s, a, r, s2, done) -> None:
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        if self._size == 0:
            raise ValueError("cannot sample an empty buffer")
        idx = rng.choice(self._size, size=min(batch, self._size), replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


# --- DQN --------------------------------------------------------------------

def dqn_select_action(qnet: NetworkParams, obs, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(qnet.arch[-1]))
    q, _ = forward(qnet, obs)
    return int(np.argmax(q))


def dqn_train_step(qnet: NetworkParams, target: NetworkParams, adam: AdamState, batch,
                   gamma: float) -> float:
    """One Adam step on the squared Bellman error of the taken actions."""
    s, a, r, s2, done = batch
    a = np.asarray(a).astype(int).ravel()
    q_next, _ = forward(target, s2)
    y = r + gamma * np.where(done, 0.0, q_next.max(axis=1))
    q, cache = forward(qnet, s)
    rows = np.arange(len(a))
    loss, g = mse_loss(q[rows, a], y)
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite DQN loss; step rejected")
    grad = np.zeros_like(q)
    grad[rows, a] = g
    adam_step(qnet, backward(qnet, cache, grad), adam)
    return loss


@dataclass
class RolloutResult:
    knots: tuple[tuple[float, float], ...]
    d: float
    rewards: list[float]

    @property
    def total(self) -> float:
        return float(sum(self.rewards))

    @property
    def terminal(self) -> float:
        return self.rewards[-1]


@dataclass
class TrainingResult:
    config: TrainingConfig
    protocol: Protocol                  # best greedy protocol
    knots: tuple[tuple[float, float], ...]
    final_knots: tuple[tuple[float, float], ...]    # greedy rollout after the last episode
    reward_history: list[float]         # cumulative reward per episode (nan if discarded)
    schedule: list[float]               # epsilon or noise std per episode
    greedy_scores: list[tuple[int, float]]
    best_score: float                   # train-tier mean terminal reward of the best protocol
    report_rewards: dict[float, float]  # report-tier terminal reward at each trained d
    report_occupations: dict[float, list[float]]
    networks: dict[str, NetworkParams]
    adams: dict[str, AdamState]
    discarded: int = 0

    @property
    def report_reward(self) -> float:
        return float(np.mean(list(self.report_rewards.values())))


def greedy_rollout(policy, config: TrainingConfig) -> tuple[tuple[float, float], ...]:
    """Knots of a deterministic policy; the observation does not include d."""
    st = EnvState(0.0, 0.0, 0, config.d_values[0])
    while st.k < config.n_t:
        raw = st.alpha + policy(st.observation(config)) * config.dt
        alpha = min(max(raw, 0.0), config.alpha_max)
        k = st.k + 1
        t = config.T if k == config.n_t else k * config.dt
        st = EnvState(alpha, t, k, st.d, st.knots + ((t, alpha),))
    return st.knots


def score_knots(knots, config: TrainingConfig, n_micro: int | None = None):
    """Terminal reward and (occ1, occ2, occ3, occ_higher) at every trained offset."""
    rewards, occs = {}, {}
    for d in config.d_values:
        occ = episode_occupations(knots, d, config, n_micro)
        rewards[d] = terminal_reward(occ, config.sigma)
        occs[d] = occ[:3].tolist() + [float(occ[2:].sum())]
    return rewards, occs


def _run_training(config: TrainingConfig, agent) -> TrainingResult:
    rng = np.random.default_rng(config.seed)
    buffer = ReplayBuffer(config.capacity, 2, 1)
    history, schedule, scores = [], [], []
    best = (-math.inf, None)
    discarded = 0

    def evaluate(ep):
        nonlocal best
        knots = greedy_rollout(agent.greedy, config)
        rewards, _ = score_knots(knots, config)
        score = float(np.mean(list(rewards.values())))
        scores.append((ep, score))
        if score > best[0]:
            best = (score, knots)
        return knots

    for ep in range(config.episodes):
        schedule.append(agent.begin_episode(ep))
        st = env_reset(config, rng)
        total = 0.0
        try:
            while True:
                obs = st.observation(config)
                stored, alpha_dot = agent.act(obs, rng)
                nxt, r, done = env_step(st, alpha_dot, config)
                buffer.push(obs, stored, r, nxt.observation(config), done)
                total += r
                if len(buffer) >= max(config.warmup, config.batch):
                    for _ in range(config.updates_per_step):
                        try:
                            agent.train(buffer.sample(config.batch, rng))
                        except NonFiniteError as exc:
                            log.warning("episode %d: %s", ep, exc)
                st = nxt
                if done:
                    break
        except EpisodeDiscarded as exc:
            log.warning("episode %d discarded: %s", ep, exc)
            discarded += 1
            total = math.nan
        history.append(total)
        if config.eval_every and (ep + 1) % config.eval_every == 0:
            evaluate(ep + 1)
    final_knots = evaluate(config.episodes)
    knots = best[1]
    rewards, occs = score_knots(knots, config, config.report_micro)
    return TrainingResult(config, knots_protocol(knots), knots, final_knots, history, schedule,
                          scores, best[0], rewards, occs, agent.networks(), agent.adams(),
                          discarded)


class _DQNAgent:
    def __init__(self, config: TrainingConfig, rng: np.random.Generator):
        self.config = config
        arch = (2,) + config.hidden + (len(ACTIONS),)
        self.q = init_network(arch, rng)
        self.target = self.q.copy()
        self.adam = AdamState.for_network(self.q, lr=config.lr)
        self.eps = 1.0

    def begin_episode(self, ep):
        self.eps = self.config.epsilon(ep)
        return self.eps

    def act(self, obs, rng):
        i = dqn_select_action(self.q, obs, self.eps, rng)
        return i, ACTIONS[i]

    def greedy(self, obs):
        return ACTIONS[dqn_select_action(self.q, obs, 0.0, None)]

    def train(self, batch):
        dqn_train_step(self.q, self.target, self.adam, batch, self.config.gamma)
        soft_update(self.target, self.q, self.config.tau)

    def networks(self):
        return {"q": self.q, "q_target": self.target}

    def adams(self):
        return {"q": self.adam}


def dqn_train(config: TrainingConfig) -> TrainingResult:
    """Deep Q-learning over the discrete alpha-dot actions.

    Networks are initialized from a stream separate from the episode stream,
    so both are fixed by ``config.seed``.
    """
    init_rng = np.random.default_rng([config.seed, 1])
    return _run_training(config, _DQNAgent(config, init_rng))


# --- DDPG -------------------------------------------------------------------

ACTOR_FINAL_INIT = 3e-3     # last actor layer drawn from U(-x, x), so mu(s) starts near 0


def ddpg_actor_init(hidden, rng: np.random.Generator) -> NetworkParams:
    """Glorot hidden layers; a small uniform last layer keeps initial |alpha-dot| ~ 3."""
    actor = init_network((2,) + tuple(hidden) + (1,), rng, output="tanh")
    actor.weights[-1][:] = rng.uniform(-ACTOR_FINAL_INIT, ACTOR_FINAL_INIT, actor.weights[-1].shape)
    actor.biases[-1][:] = rng.uniform(-ACTOR_FINAL_INIT, ACTOR_FINAL_INIT, actor.biases[-1].shape)
    return actor


def ddpg_actor_forward(actor: NetworkParams, obs) -> float:
    """alpha-dot = ACTION_BOUND * tanh(z); |alpha-dot| <= ACTION_BOUND always."""
    out, _ = forward(actor, obs)
    return float(min(max(ACTION_BOUND * out[0], -ACTION_BOUND), ACTION_BOUND))


def ddpg_explore(action: float, noise_sigma: float, rng: np.random.Generator) -> float:
    """Gaussian exploration; ``noise_sigma`` is a fraction of ACTION_BOUND."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if noise_sigma == 0:
        return float(action)
    a = action + rng.normal() * noise_sigma * ACTION_BOUND
    return float(min(max(a, -ACTION_BOUND), ACTION_BOUND))


def actor_gradient(actor: NetworkParams, states, dq_da) -> Gradients:
    """Gradient of -mean_s Q(s, mu(s)) w.r.t. actor parameters.

    ``dq_da(states, actions)`` returns dQ/d(alpha-dot) at the actor's actions.
    """
    out, cache = forward(actor, states)
    actions = ACTION_BOUND * out
    g = np.asarray(dq_da(states, actions), dtype=float).reshape(out.shape)
    return backward(actor, cache, -ACTION_BOUND * g / len(states))


def critic_input(states, actions) -> np.ndarray:
    return np.hstack([np.asarray(states), np.asarray(actions).reshape(-1, 1) / ACTION_BOUND])


def critic_dq_da(critic: NetworkParams):
    def dq_da(states, actions):
        out, cache = forward(critic, critic_input(states, actions))
        g = backward(critic, cache, np.ones_like(out)).input
        return g[:, -1] / ACTION_BOUND
    return dq_da


def ddpg_train_step(actor, critic, actor_target, critic_target, actor_adam, critic_adam,
                    batch, gamma: float, tau: float) -> float:
    """Critic regression on the target-network bootstrap, then one actor ascent step."""
    s, a, r, s2, done = batch
    a2 = ACTION_BOUND * forward(actor_target, s2)[0]
    q2 = forward(critic_target, critic_input(s2, a2))[0][:, 0]
    y = r + gamma * np.where(done, 0.0, q2)
    q, cache = forward(critic, critic_input(s, a))
    loss, g = mse_loss(q[:, 0], y)
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite critic loss; step rejected")
    critic_grads = backward(critic, cache, g.reshape(-1, 1))
    actor_grads = actor_gradient(actor, s, critic_dq_da(critic))
    adam_step(critic, critic_grads, critic_adam)
    adam_step(actor, actor_grads, actor_adam)
    soft_update(critic_target, critic, tau)
    soft_update(actor_target, actor, tau)
    return loss


class _DDPGAgent:
    def __init__(self, config: TrainingConfig, rng: np.random.Generator):
        self.config = config
        self.actor = ddpg_actor_init(config.hidden, rng)
        self.critic = init_network((3,) + config.hidden + (1,), rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_adam = AdamState.for_network(self.actor, lr=config.lr)
        self.critic_adam = AdamState.for_network(self.critic, lr=config.lr)
        self.sigma = config.noise_start

    def begin_episode(self, ep):
        self.sigma = self.config.noise(ep)
        return self.sigma

    def act(self, obs, rng):
        a = ddpg_explore(ddpg_actor_forward(self.actor, obs), self.sigma, rng)
        return a, a

    def greedy(self, obs):
        return ddpg_actor_forward(self.actor, obs)

    def train(self, batch):
        ddpg_train_step(self.actor, self.critic, self.actor_target, self.critic_target,
                        self.actor_adam, self.critic_adam, batch, self.config.gamma,
                        self.config.tau)

    def networks(self):
        return {"actor": self.actor, "critic": self.critic,
                "actor_target": self.actor_target, "critic_target": self.critic_target}

    def adams(self):
        return {"actor": self.actor_adam, "critic": self.critic_adam}


def ddpg_train(config: TrainingConfig) -> TrainingResult:
    """Deep deterministic policy gradient with annealed Gaussian exploration."""
    init_rng = np.random.default_rng([config.seed, 2])
    return _run_training(config, _DDPGAgent(config, init_rng))


# --- robustness -------------------------------------------------------------

@dataclass
class RobustEvaluation:
    mean_cost: float
    rows: list          # dynamics.SweepRow per sampled d


def evaluate_robust(protocol, d_range, n_samples: int, box_width: float = 1.0,
                    n_micro: int | None = None, n_basis: int = DEFAULT_N_BASIS,
                    jobs: int = 1) -> RobustEvaluation:
    """Sweep ``protocol`` over ``n_samples`` evenly spaced offsets in ``d_range``."""
    lo, hi = (float(v) for v in d_range)
    if hi < lo or n_samples < 1:
        raise ValueError("need d_min <= d_max and n_samples >= 1")
    ds = [lo] if n_samples == 1 or hi == lo else np.linspace(lo, hi, n_samples).tolist()
    if n_micro is None:
        n_micro = default_micro_steps(protocol.duration, "report")
    rows = sweep_protocol(protocol, ds, box_width, n_micro, n_basis, jobs)
    ok = [r.cost for r in rows if not r.failed]
    return RobustEvaluation(float(np.mean(ok)) if ok else math.nan, rows)
