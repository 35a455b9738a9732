"""Clipped-surrogate policy optimization over vectorized tasks.

A task is any object with

    obs_dim, act_dim, gamma, obs_scale (optional)
    reset(n, rng) -> state          dict of arrays, leading dimension n
    observe(state) -> (n, obs_dim)
    step(state, action, rng) -> (state, reward, terminated, truncated)
    success(state) -> (n,) bool     optional, evaluated at episode end

Policies are Gaussian with a state-independent log standard deviation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approx import MLP, NetSpec, OptimizerState, optimizer_step
from .seeding import child_seed

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PPOConfig:
    clip: float = 0.2
    gae_lambda: float = 0.95
    batch_steps: int = 2048
    epochs: int = 10
    minibatch: int = 256
    learning_rate: float = 3e-4
    value_learning_rate: float = 1e-3
    n_envs: int = 16
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5
    min_log_std: float = -3.0
    normalize_advantages: bool = True
    value_refit_epochs: int = 20
    value_scale: float = 1.0        # value net predicts return / value_scale

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.batch_steps < self.n_envs:
            raise ValueError("batch_steps must be >= n_envs")
        self.hidden = tuple(self.hidden)


class GaussianPolicy:
    def __init__(self, in_dim, act_dim, hidden=(64, 64), init_log_std=-0.5, seed=0):
        self.net = MLP(NetSpec(in_dim, hidden, act_dim, seed=child_seed(seed, "policy")))
        # small final layer so the initial mean is near zero
        W, b = self.net._layers[-1]
        W *= 0.01
        b *= 0.0
        self.log_std = np.full(act_dim, float(init_log_std))

    @property
    def in_dim(self):
        return self.net.spec.input_dim

    def mean(self, x):
        return self.net(x)

    def sample(self, x, rng):
        mu = self.net(x)
        std = np.exp(self.log_std)
        a = mu + std * rng.standard_normal(mu.shape)
        return a, self.log_prob_from_mean(mu, a)

    def log_prob_from_mean(self, mu, a):
        z = (a - mu) / np.exp(self.log_std)
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * mu.shape[-1] * LOG_2PI

    def log_prob(self, x, a):
        return self.log_prob_from_mean(self.net(x), a)

    def copy(self):
        other = object.__new__(GaussianPolicy)
        other.net = self.net.copy()
        other.log_std = self.log_std.copy()
        return other


def make_value(in_dim, hidden=(64, 64), seed=0):
    return MLP(NetSpec(in_dim, hidden, 1, seed=child_seed(seed, "value")))


def _take(state, idx):
    return {k: v[idx] for k, v in state.items()}


def _put(state, idx, new):
    for k, v in new.items():
        state[k] = state[k].copy()
        state[k][idx] = v


@dataclass
class Episode:
    ret: float
    disc_ret: float
    length: int
    terminated: bool
    success: bool
    start_obs: np.ndarray
    info: dict = None


@dataclass
class Batch:
    inputs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episodes: list = field(default_factory=list)


class DefaultActor:
    """Policy input is the task observation; action sampled once."""

    def __init__(self, policy):
        self.policy = policy

    def __call__(self, obs, state, rng):
        a, lp = self.policy.sample(obs, rng)
        return obs, a, lp


class Runner:
    """Keeps ``n_envs`` environments running across collection calls."""

    def __init__(self, task, n_envs, rng):
        self.task = task
        self.rng = rng
        self.n = n_envs
        self.state = task.reset(n_envs, rng)
        self.ep_ret = np.zeros(n_envs)
        self.ep_disc = np.zeros(n_envs)
        self.ep_len = np.zeros(n_envs, dtype=int)
        self.start_obs = task.observe(self.state)

    def collect(self, actor, value, steps_per_env, gamma, lam):
        task, n = self.task, self.n
        X, A, LP, R, V, DONE, TERM, BOOT = [], [], [], [], [], [], [], []
        episodes = []
        for _ in range(steps_per_env):
            obs = task.observe(self.state)
            x, a, lp = actor(obs, self.state, self.rng)
            v = value(x)[:, 0]
            nxt, r, term, trunc = task.step(self.state, a, self.rng)
            done = term | trunc
            boot = np.zeros(n)
            if np.any(trunc & ~term):
                idx = np.flatnonzero(trunc & ~term)
                obs_end = task.observe(_take(nxt, idx))
                x_end = actor.bootstrap_input(obs_end, _take(nxt, idx)) if hasattr(actor, "bootstrap_input") else obs_end
                boot[idx] = value(x_end)[:, 0]
            self.ep_disc += (gamma ** self.ep_len) * r
            self.ep_ret += r
            self.ep_len += 1
            X.append(x); A.append(a); LP.append(lp); R.append(r); V.append(v)
            DONE.append(done); TERM.append(term); BOOT.append(boot)
            if np.any(done):
                idx = np.flatnonzero(done)
                ended = _take(nxt, idx)
                succ = task.success(ended) if hasattr(task, "success") else np.zeros(idx.size, bool)
                infos = task.episode_info(ended) if hasattr(task, "episode_info") else [None] * idx.size
                for k, i in enumerate(idx):
                    episodes.append(Episode(float(self.ep_ret[i]), float(self.ep_disc[i]), int(self.ep_len[i]),
                                            bool(term[i]), bool(succ[k]),
                                            self.start_obs[i].copy(), infos[k]))
                fresh = task.reset(idx.size, self.rng)
                _put(nxt, idx, fresh)
                self.start_obs = self.start_obs.copy()
                self.start_obs[idx] = task.observe(fresh)
                self.ep_ret[idx] = 0.0
                self.ep_disc[idx] = 0.0
                self.ep_len[idx] = 0
            self.state = nxt
        obs = task.observe(self.state)
        x_last = actor.bootstrap_input(obs, self.state) if hasattr(actor, "bootstrap_input") else obs
        v_last = value(x_last)[:, 0]
        # generalized advantage estimation, time-major
        Tn = len(R)
        adv = np.zeros((Tn, n))
        gae = np.zeros(n)
        for t in range(Tn - 1, -1, -1):
            if t == Tn - 1:
                v_next = v_last
            else:
                v_next = V[t + 1]
            v_next = np.where(DONE[t], BOOT[t], v_next)
            delta = R[t] + gamma * v_next - V[t]
            gae = delta + gamma * lam * np.where(DONE[t], 0.0, gae)
            adv[t] = gae
        ret = adv + np.array(V)
        flat = lambda z: np.asarray(z).reshape(Tn * n, *np.asarray(z).shape[2:])
        return Batch(flat(X), flat(A), flat(LP), flat(adv), flat(ret), episodes)


class PPO:
    def __init__(self, in_dim, act_dim, config: PPOConfig = None, seed=0):
        self.cfg = config or PPOConfig()
        c = self.cfg
        self.policy = GaussianPolicy(in_dim, act_dim, c.hidden, c.init_log_std, seed)
        self.value = make_value(in_dim, c.hidden, seed)
        self.opt_pi = OptimizerState("adam", c.learning_rate, self.policy.net.spec.param_count)
        self.opt_std = OptimizerState("adam", c.learning_rate, act_dim)
        self.opt_v = OptimizerState("adam", c.value_learning_rate, self.value.spec.param_count)

    def update(self, batch: Batch, rng):
        c = self.cfg
        N = len(batch.returns)
        adv = batch.advantages
        if c.normalize_advantages and N > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        stats = {"clip_frac": 0.0}
        clipped = 0
        for _ in range(c.epochs):
            perm = rng.permutation(N)
            for start in range(0, N, c.minibatch):
                mb = perm[start:start + c.minibatch]
                x, a, lp_old, A = batch.inputs[mb], batch.actions[mb], batch.logp[mb], adv[mb]
                mu, cache = self.policy.net.forward_cache(x)
                lp = self.policy.log_prob_from_mean(mu, a)
                ratio = np.exp(lp - lp_old)
                active = np.where(A >= 0, ratio < 1.0 + c.clip, ratio > 1.0 - c.clip)
                clipped += int(np.count_nonzero(~active))
                w = ratio * A * active / len(mb)
                var = np.exp(2.0 * self.policy.log_std)
                diff = a - mu
                g_mu = w[:, None] * diff / var
                g = self.policy.net.backward(cache, g_mu)
                g_std = np.sum(w[:, None] * (diff * diff / var - 1.0), axis=0)
                self.policy.net.params = optimizer_step(self.opt_pi, self.policy.net.params, g, ascend=True)
                self.policy.log_std = np.maximum(
                    optimizer_step(self.opt_std, self.policy.log_std, g_std, ascend=True), c.min_log_std)
                self._value_step(x, batch.returns[mb])
        stats["clip_frac"] = clipped / max(1, c.epochs * N)
        return stats

    def predict_value(self, x):
        return self.value(x) * self.cfg.value_scale

    def _value_step(self, x, target):
        v, cache = self.value.forward_cache(x)
        g = self.value.backward(cache, (v[:, 0] - target / self.cfg.value_scale)[:, None] / len(target))
        self.value.params = optimizer_step(self.opt_v, self.value.params, g)

    def refit_value(self, inputs, returns, rng, epochs=None):
        """Extra regression of the value net on observed returns."""
        epochs = self.cfg.value_refit_epochs if epochs is None else epochs
        N = len(returns)
        for _ in range(epochs):
            perm = rng.permutation(N)
            for start in range(0, N, self.cfg.minibatch):
                mb = perm[start:start + self.cfg.minibatch]
                self._value_step(inputs[mb], returns[mb])


def discounted_mc_returns(rewards, dones, gamma):
    """Monte-Carlo returns per step for (T, n) arrays (episodes cut at ``dones``)."""
    T = len(rewards)
    out = np.zeros_like(np.asarray(rewards, dtype=float))
    g = np.zeros(out.shape[1])
    for t in range(T - 1, -1, -1):
        g = rewards[t] + gamma * np.where(dones[t], 0.0, g)
        out[t] = g
    return out


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    steps: int = 0
    episodes: list = field(default_factory=list)
    last_batch: Batch = None


def ppo_train(task, iterations, config: PPOConfig = None, seed=0, rng=None, agent: PPO = None,
              actor=None, on_iteration=None, refit_value=True):
    """Train a Gaussian policy and value net on ``task``; returns ``(agent, log)``.

    ``actor`` customizes how policy inputs and actions are produced (see
    :class:`DefaultActor`); ``on_iteration(it, batch, agent)`` may return
    extra metric columns.
    """
    from .seeding import stream
    cfg = config or PPOConfig()
    in_dim = task.obs_dim if actor is None else actor.in_dim
    agent = agent or PPO(in_dim, task.act_dim, cfg, seed)
    actor = actor or DefaultActor(agent.policy)
    rng = rng or stream(seed, "ppo", "rollout")
    upd_rng = stream(seed, "ppo", "update")
    runner = Runner(task, cfg.n_envs, rng)
    log = TrainLog()
    steps_per_env = cfg.batch_steps // cfg.n_envs
    last = None
    for it in range(iterations):
        batch = runner.collect(actor, agent.predict_value, steps_per_env, task.gamma, cfg.gae_lambda)
        log.steps += len(batch.returns)
        agent.update(batch, upd_rng)
        eps = batch.episodes
        row = {"iteration": it, "steps": log.steps, "episodes": len(eps),
               "mean_return": float(np.mean([e.ret for e in eps])) if eps else float("nan"),
               "success_rate": float(np.mean([e.success for e in eps])) if eps else float("nan"),
               "log_std": float(np.mean(agent.policy.log_std))}
        if on_iteration is not None:
            row.update(on_iteration(it, batch, agent) or {})
        log.rows.append(row)
        log.episodes.extend(eps)
        last = batch
    log.last_batch = last
    if refit_value and last is not None and iterations > 0:
        agent.refit_value(last.inputs, last.returns, upd_rng)
    return agent, log


def run_episodes(task, policy_fn, n, rng, max_steps=100000, record=False):
    """Roll ``n`` episodes in parallel with ``policy_fn(obs, state) -> action``.

    Returns a dict with per-episode ``ret``, ``disc_ret``, ``terminated``,
    ``success``, ``length`` and, if ``record``, the visited observations.
    """
    state = task.reset(n, rng)
    alive = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    disc = np.zeros(n)
    length = np.zeros(n, dtype=int)
    term_all = np.zeros(n, dtype=bool)
    succ = np.zeros(n, dtype=bool)
    traj = [task.observe(state)] if record else None
    final = {k: v.copy() for k, v in state.items()}
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        sub = _take(state, idx)
        a = policy_fn(task.observe(sub), sub)
        nxt, r, term, trunc = task.step(sub, a, rng)
        disc[idx] += task.gamma ** length[idx] * r
        ret[idx] += r
        length[idx] += 1
        done = term | trunc
        _put(state, idx, nxt)
        if record:
            traj.append(task.observe(state))
        if np.any(done):
            di = idx[done]
            term_all[di] = term[done]
            if hasattr(task, "success"):
                succ[di] = task.success(_take(nxt, np.flatnonzero(done)))
            _put(final, di, _take(nxt, np.flatnonzero(done)))
            alive[di] = False
    out = {"ret": ret, "disc_ret": disc, "terminated": term_all, "success": succ, "length": length,
           "final": final}
    if record:
        out["obs"] = np.array(traj)
    return out
