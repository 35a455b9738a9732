"""Error-aware policies for zero-shot transfer, with domain-randomization (DR)
and universal-policy (UP) baselines, on the cart-pole swing-up.

Dynamics split into observable parameters ``mu`` (pole length, pole mass,
cart mass) and unobservable ones ``nu`` (rotational damping, rotational and
translational friction).  An error function ``E(s, a, mu)`` predicts how far
the state drifts from the reference environment over ``T`` control steps when
the nominal action ``a`` is applied; the policy ``pi(a | s, mu, e)`` takes that
prediction as an extra input and learns to correct for it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approx import MLP, NetSpec, OptimizerState, net_from_dict, net_to_dict, optimizer_step
from .curriculum import measure_roa
from .envs.cartpole import (HANGING, MU_FIELDS, NU_FIELDS, CartpoleParams, SwingupConfig,
                            SwingupTask, cartpole_step)
from .ppo import PPO, PPOConfig, Runner, ppo_train
from .seeding import child_seed, stream

FORMAT_VERSION = 1
# heavier pole than the relay task: friction in [0, 0.08] is then a moderate
# disturbance rather than one that makes swing-up impossible
NOMINAL = CartpoleParams(pole_mass=0.5)
MU_NOMINAL = NOMINAL.mu
NU_SCALE = 0.05                     # nu features are nu / NU_SCALE


def mu_features(mu):
    return np.asarray(mu, dtype=np.float64) / MU_NOMINAL - 1.0


def nu_features(nu):
    return np.asarray(nu, dtype=np.float64) / NU_SCALE


# ---------------------------------------------------------------- environments

@dataclass
class EnvRanges:
    """Relative deviation of ``mu`` from nominal and absolute ``nu`` ranges."""
    train_mu_dev: float = 0.25
    train_nu: tuple = (0.0, 0.05)
    test_mu_dev: tuple = (0.25, 0.40)
    test_nu: tuple = (0.05, 0.08)

    def __post_init__(self):
        lo, hi = self.test_mu_dev
        if not 0 <= self.train_mu_dev <= lo < hi < 1:
            raise ValueError("test mu deviations must lie beyond the training deviation")
        if not 0 <= self.train_nu[0] <= self.train_nu[1] <= self.test_nu[0] < self.test_nu[1]:
            raise ValueError("test nu range must lie above the training nu range")


@dataclass
class EnvSet:
    reference: tuple                        # (mu, nu)
    train: list                             # [(mu, nu), ...]
    validation: list
    ranges: EnvRanges = field(default_factory=EnvRanges)

    def __post_init__(self):
        self.reference = (np.asarray(self.reference[0], float), np.asarray(self.reference[1], float))
        self.train = [(np.asarray(m, float), np.asarray(n, float)) for m, n in self.train]
        self.validation = [(np.asarray(m, float), np.asarray(n, float)) for m, n in self.validation]
        if not self.train:
            raise ValueError("training set is empty")
        self.check_disjoint()

    def check_disjoint(self):
        r = self.ranges
        for mu, nu in self.validation:
            dev = np.abs(mu / MU_NOMINAL - 1.0)
            inside = np.all(dev <= r.train_mu_dev) and np.all((nu >= r.train_nu[0]) & (nu <= r.train_nu[1]))
            if inside:
                raise ValueError(f"validation env mu={mu}, nu={nu} lies inside the training ranges")

    @staticmethod
    def dyn(pair):
        return np.concatenate([pair[0], pair[1]])

    def to_dict(self):
        pairs = lambda ps: [{"mu": m.tolist(), "nu": n.tolist()} for m, n in ps]
        return {"format_version": FORMAT_VERSION,
                "reference": {"mu": self.reference[0].tolist(), "nu": self.reference[1].tolist()},
                "train": pairs(self.train), "validation": pairs(self.validation),
                "ranges": {"train_mu_dev": self.ranges.train_mu_dev, "train_nu": list(self.ranges.train_nu),
                           "test_mu_dev": list(self.ranges.test_mu_dev), "test_nu": list(self.ranges.test_nu)}}

    @classmethod
    def from_dict(cls, d):
        pairs = lambda ps: [(p["mu"], p["nu"]) for p in ps]
        rg = d["ranges"]
        ranges = EnvRanges(rg["train_mu_dev"], tuple(rg["train_nu"]), tuple(rg["test_mu_dev"]), tuple(rg["test_nu"]))
        return cls((d["reference"]["mu"], d["reference"]["nu"]), pairs(d["train"]), pairs(d["validation"]), ranges)


def make_env_set(n_train=6, n_validation=5, ranges: EnvRanges = None, seed=0):
    """Reference = nominal parameters without friction; training pairs drawn
    inside the training ranges, validation pairs strictly outside them."""
    ranges = ranges or EnvRanges()
    rng = stream(seed, "eap", "envset")
    ref = (MU_NOMINAL.copy(), np.zeros(len(NU_FIELDS)))
    train = []
    for _ in range(n_train):
        mu = MU_NOMINAL * (1.0 + rng.uniform(-ranges.train_mu_dev, ranges.train_mu_dev, len(MU_FIELDS)))
        train.append((mu, rng.uniform(*ranges.train_nu, len(NU_FIELDS))))
    val = []
    for _ in range(n_validation):
        sign = rng.choice([-1.0, 1.0], len(MU_FIELDS))
        mu = MU_NOMINAL * (1.0 + sign * rng.uniform(*ranges.test_mu_dev, len(MU_FIELDS)))
        val.append((mu, rng.uniform(*ranges.test_nu, len(NU_FIELDS))))
    return EnvSet(ref, train, val, ranges)


def env_task(pairs, rng_free=False, cfg: SwingupConfig = None, start=None):
    """Swing-up task whose episodes draw their dynamics uniformly from ``pairs``.

    A single pair never touches the random stream, so one-environment training
    reproduces plain training on that environment bitwise.
    """
    rows = np.array([EnvSet.dyn(p) for p in pairs])
    base = NOMINAL.with_dynamics(rows[0][:3], rows[0][3:])
    if len(rows) == 1:
        return SwingupTask(base, cfg, start)

    def sampler(n, rng):
        return rows[rng.integers(len(rows), size=n)]
    return SwingupTask(base, cfg, start, dyn_sampler=sampler)


def advance(task: SwingupTask, s, a, dyn):
    """One control step of the raw dynamics (no reward, no termination)."""
    u = task.force(a)
    for _ in range(task.substeps):
        s = cartpole_step(task.p, s, u, dyn)
    return s


# ---------------------------------------------------------------- error function

class ErrorFn:
    """Maps ``(s, a, mu)`` to the predicted state error after ``T`` steps.

    ``representation="full"`` feeds the predicted 4-d error to the policy;
    ``"projected"`` passes the input through a ``bottleneck``-wide code that is
    decoded linearly to the full error, and the policy sees the code.  Either
    way the policy input is divided by a per-dimension RMS scale, so a zero
    prediction stays exactly zero.
    """

    def __init__(self, representation="projected", bottleneck=2, hidden=(32, 16), state_dim=4,
                 learning_rate=1e-3, seed=0, clip=None):
        if representation not in ("full", "projected"):
            raise ValueError(f"unknown error representation {representation!r}")
        self.representation = representation
        self.state_dim = state_dim
        in_dim = 5 + 1 + len(MU_FIELDS)
        code = state_dim if representation == "full" else int(bottleneck)
        self.encoder = MLP(NetSpec(in_dim, hidden, code, seed=child_seed(seed, "errfn", "enc")))
        self.decoder = None
        if representation == "projected":
            self.decoder = MLP(NetSpec(code, (), state_dim, seed=child_seed(seed, "errfn", "dec")))
        self.code_scale = np.ones(code)
        self.clip = clip
        self.learning_rate = learning_rate
        self._opt = OptimizerState("adam", learning_rate, self._param_count())

    @property
    def code_dim(self):
        return self.encoder.spec.output_dim

    def _param_count(self):
        return self.encoder.spec.param_count + (0 if self.decoder is None else self.decoder.spec.param_count)

    @staticmethod
    def inputs(s, a, mu):
        s = np.asarray(s, dtype=np.float64)
        return np.concatenate([_obs(s), np.asarray(a, float).reshape(len(s), -1), mu_features(mu)], axis=1)

    def code(self, x):
        return self.encoder(x)

    def predict(self, x):
        c = self.encoder(x)
        return c if self.decoder is None else self.decoder(c)

    def policy_error(self, x):
        e = self.code(x) / self.code_scale
        # out-of-range parameters can push predictions far outside the training scale
        return e if self.clip is None else np.clip(e, -self.clip, self.clip)

    def zero_(self):
        """Make the error function output exactly zero."""
        for net in (self.encoder, self.decoder):
            if net is None:
                continue
            s = net.spec.sizes
            last = (s[-2] + 1) * s[-1]
            p = net.params.copy()
            p[-last:] = 0.0
            net.params = p
        return self

    def loss(self, x, y):
        """Sum over entries of the squared error norm."""
        d = self.predict(x) - y
        return float(np.sum(d * d))

    def _grad(self, x, y):
        c, enc_cache = self.encoder.forward_cache(x)
        if self.decoder is None:
            g_out = 2.0 * (c - y) / len(y)
            return self.encoder.backward(enc_cache, g_out)
        out, dec_cache = self.decoder.forward_cache(c)
        g_out = 2.0 * (out - y) / len(y)
        g_dec, g_code = self.decoder.backward(dec_cache, g_out, need_input=True)
        g_enc = self.encoder.backward(enc_cache, g_code)
        return np.concatenate([g_enc, g_dec])

    def _set_params(self, flat):
        n = self.encoder.spec.param_count
        self.encoder.params = flat[:n]
        if self.decoder is not None:
            self.decoder.params = flat[n:]

    def _params(self):
        if self.decoder is None:
            return self.encoder.params
        return np.concatenate([self.encoder.params, self.decoder.params])

    def step(self, x, y):
        self._set_params(optimizer_step(self._opt, self._params(), self._grad(x, y)))

    def update_scale(self, x):
        rms = np.sqrt(np.mean(self.code(x) ** 2, axis=0))
        self.code_scale = np.where(rms > 1e-8, rms, 1.0)

    def to_dict(self):
        return {"representation": self.representation, "code_scale": self.code_scale.tolist(),
                "encoder": net_to_dict(self.encoder.spec, self.encoder.params),
                "decoder": None if self.decoder is None else net_to_dict(self.decoder.spec, self.decoder.params),
                "learning_rate": self.learning_rate, "clip": self.clip}

    @classmethod
    def from_dict(cls, d):
        E = object.__new__(cls)
        E.representation = d["representation"]
        spec, params = net_from_dict(d["encoder"])
        E.encoder = MLP(spec, params)
        E.decoder = None
        if d["decoder"] is not None:
            spec, params = net_from_dict(d["decoder"])
            E.decoder = MLP(spec, params)
        E.state_dim = (E.decoder or E.encoder).spec.output_dim
        E.code_scale = np.asarray(d["code_scale"], float)
        E.learning_rate = d["learning_rate"]
        E.clip = d.get("clip")
        E._opt = OptimizerState("adam", E.learning_rate, E._param_count())
        return E


def _obs(s):
    cfg = SwingupConfig()
    return np.stack([s[:, 0] / cfg.track_limit, s[:, 1] / 2.0, np.cos(s[:, 2]), np.sin(s[:, 2]),
                     s[:, 3] / 5.0], axis=1)


@dataclass
class ErrorData:
    s0: np.ndarray
    a0: np.ndarray
    sT: np.ndarray          # validation-env state after T steps
    s0T: np.ndarray         # reference-env state after T steps
    mu: np.ndarray          # validation-env observable parameters

    @property
    def labels(self):
        return self.s0T - self.sT

    def inputs(self):
        return ErrorFn.inputs(self.s0, self.a0, self.mu)

    def __len__(self):
        return len(self.s0)

    @classmethod
    def empty(cls, state_dim=4, act_dim=1, mu_dim=3):
        z = lambda d: np.zeros((0, d))
        return cls(z(state_dim), z(act_dim), z(state_dim), z(state_dim), z(mu_dim))

    def extend(self, other, cap=None):
        parts = {k: np.concatenate([getattr(self, k), getattr(other, k)]) for k in ("s0", "a0", "sT", "s0T", "mu")}
        if cap is not None:
            parts = {k: v[-cap:] for k, v in parts.items()}
        return ErrorData(**parts)


def collect_error_data(policy, task: SwingupTask, ref_dyn, val_dyn, buffer_states, T, n, rng):
    """Roll ``n`` buffer states ``T`` steps forward in the reference and the
    validation dynamics with the nominal (``e = 0``) policy.

    Both branches use the same action noise, so any divergence comes from the
    dynamics alone.
    """
    if int(T) < 1:
        raise ValueError("error horizon T must be >= 1")
    ref_dyn = np.asarray(ref_dyn, float)
    val_dyn = np.asarray(val_dyn, float)
    idx = rng.integers(len(buffer_states), size=n)
    s_ref = np.array(buffer_states[idx], dtype=np.float64)
    s_val = s_ref.copy()
    s0 = s_ref.copy()
    mu_ref = np.tile(ref_dyn[:3], (n, 1))
    mu_val = np.tile(val_dyn[:3], (n, 1))
    a0 = None
    for t in range(int(T)):
        noise = rng.standard_normal((n, policy.act_dim))
        a_ref = policy.nominal_mean(_obs(s_ref), mu_ref) + policy.std * noise
        a_val = policy.nominal_mean(_obs(s_val), mu_val) + policy.std * noise
        if t == 0:
            a0 = a_val
        s_ref = advance(task, s_ref, a_ref, ref_dyn)
        s_val = advance(task, s_val, a_val, val_dyn)
    return ErrorData(s0, a0, s_val, s_ref, mu_val)


def train_error_fn(E: ErrorFn, data: ErrorData, epochs=5, rng=None, holdout=0.2, minibatch=64):
    """Minibatch Adam on the squared error loss; returns per-epoch train and
    holdout mean squared errors (mean over entries and state dimensions)."""
    rng = rng or np.random.default_rng(0)
    x, y = data.inputs(), data.labels
    N = len(y)
    perm = rng.permutation(N)
    n_hold = int(round(holdout * N)) if N > 1 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    mse = lambda idx: float(np.mean((E.predict(x[idx]) - y[idx]) ** 2)) if len(idx) else float("nan")
    report = {"train_mse": [], "holdout_mse": []}
    for _ in range(epochs):
        order = rng.permutation(train)
        for start in range(0, len(order), minibatch):
            mb = order[start:start + minibatch]
            E.step(x[mb], y[mb])
        report["train_mse"].append(mse(train))
        report["holdout_mse"].append(mse(hold))
    E.update_scale(x)
    return report


# ---------------------------------------------------------------- policies

class EAPolicy:
    """Gaussian policy on ``(observation, mu features, scaled error)``.

    ``queries`` counts policy-mean evaluations so the two-query rollout
    protocol can be audited.
    """

    def __init__(self, err_dim, ppo: PPOConfig = None, seed=0, obs_dim=5, act_dim=1):
        self.obs_dim, self.err_dim, self.act_dim = obs_dim, int(err_dim), act_dim
        self.agent = PPO(obs_dim + len(MU_FIELDS) + self.err_dim, act_dim, ppo, seed)
        self.queries = 0

    @property
    def policy(self):
        return self.agent.policy

    @property
    def std(self):
        return np.exp(self.policy.log_std)

    def inputs(self, obs, mu, e=None):
        e = np.zeros((len(obs), self.err_dim)) if e is None else e
        return np.concatenate([obs, mu_features(mu), e], axis=1)

    def mean(self, x):
        self.queries += 1
        return self.policy.mean(x)

    def nominal_mean(self, obs, mu):
        return self.mean(self.inputs(obs, mu))


class NominalActor:
    """Policy input ``(obs, mu, e=0)``; one sample per step."""

    def __init__(self, pol: EAPolicy):
        self.pol = pol
        self.in_dim = pol.policy.in_dim

    def __call__(self, obs, state, rng):
        x = self.bootstrap_input(obs, state)
        a, lp = self.pol.policy.sample(x, rng)
        return x, a, lp

    def bootstrap_input(self, obs, state):
        return self.pol.inputs(obs, state["dyn"][:, :3])


class EAPActor:
    """Query the nominal action, predict its error, query the corrected action.

    The nominal action's exploration noise comes from ``aux_rng`` so the
    corrected action consumes the main stream exactly as the nominal policy
    would; visited states are kept for error-data collection.
    """

    def __init__(self, pol: EAPolicy, E: ErrorFn, aux_rng, keep_states=4096):
        self.pol, self.E, self.aux_rng = pol, E, aux_rng
        self.in_dim = pol.policy.in_dim
        self.keep = keep_states
        self.visited = []

    def _error(self, s, a, mu):
        return self.E.policy_error(ErrorFn.inputs(s, a, mu))

    def __call__(self, obs, state, rng):
        mu = state["dyn"][:, :3]
        a = self.pol.nominal_mean(obs, mu)
        a = a + self.pol.std * self.aux_rng.standard_normal(a.shape)
        x = self.pol.inputs(obs, mu, self._error(state["s"], a, mu))
        self.pol.queries += 1
        a_hat, lp = self.pol.policy.sample(x, rng)
        self.visited.append(state["s"].copy())
        if len(self.visited) * len(obs) > self.keep:
            self.visited.pop(0)
        return x, a_hat, lp

    def bootstrap_input(self, obs, state):
        mu = state["dyn"][:, :3]
        a = self.pol.nominal_mean(obs, mu)
        return self.pol.inputs(obs, mu, self._error(state["s"], a, mu))

    def buffer(self):
        return np.concatenate(self.visited) if self.visited else np.zeros((0, 4))


def eap_act(pol: EAPolicy, E: ErrorFn, obs, state):
    """Deterministic error-aware action (two policy queries)."""
    mu = state["dyn"][:, :3]
    a = pol.nominal_mean(obs, mu)
    e = E.policy_error(ErrorFn.inputs(state["s"], a, mu))
    return pol.mean(pol.inputs(obs, mu, e))


def eap_rollout(pol: EAPolicy, E: ErrorFn, task: SwingupTask, n, rng, aux_rng=None, states=None):
    """Run ``n`` stochastic episodes with the two-query protocol.

    Returns per-step arrays (time-major, masked by ``alive``): start states,
    policy inputs, nominal actions, corrected actions, their log-probabilities
    and rewards, plus the per-episode return accumulated from the environment.
    """
    aux_rng = aux_rng or stream(0, "eap", "aux")
    actor = EAPActor(pol, E, aux_rng)
    state = task.reset(n, rng, states=states)
    start = state["s"].copy()
    alive = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    out = {"x": [], "a_hat": [], "logp": [], "r": [], "alive": []}
    for _ in range(task.n_steps):
        obs = task.observe(state)
        x, a_hat, lp = actor(obs, state, rng)
        state, r, term, trunc = task.step(state, a_hat, rng)
        r = np.where(alive, r, 0.0)
        ret += r
        for k, v in (("x", x), ("a_hat", a_hat), ("logp", lp), ("r", r), ("alive", alive.copy())):
            out[k].append(v)
        alive &= ~(term | trunc)
        if not alive.any():
            break
    res = {k: np.array(v) for k, v in out.items()}
    res.update(start=start, env_return=ret, dyn=state["dyn"])
    return res


# ---------------------------------------------------------------- training

@dataclass
class EAPConfig:
    sample_budget: int = 800_000           # total simulated steps, error data included
    pretrain_iterations: int = 150
    pretrain_check: int = 40               # restart pre-training if the return is below the bar here
    pretrain_bar: float = 30.0
    pretrain_restarts: int = 3
    updates_per_env: int = 4
    horizon: int = 5
    error_entries: int = 64                # error-data entries per update
    error_epochs: int = 2
    error_cap: int = 20_000                # most recent entries kept
    representation: str = "projected"
    bottleneck: int = 2
    error_hidden: tuple = (32, 16)
    error_clip: float = None               # optional bound on the scaled error the policy sees
    eval_probes: int = 20
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def pretrain_reference(env_set: EnvSet, cfg: EAPConfig = None, seed=0, err_dim=None):
    """PPO on the reference environment with the error input held at zero.

    A run whose mean episode return is still below ``cfg.pretrain_bar`` after
    ``cfg.pretrain_check`` iterations is abandoned and restarted from a fresh
    seed (at most ``cfg.pretrain_restarts`` times); abandoned samples still
    count.  Returns ``(policy, log)`` with ``log.steps`` covering all attempts.
    """
    cfg = cfg or EAPConfig()
    err_dim = err_dim or (4 if cfg.representation == "full" else cfg.bottleneck)
    task = env_task([env_set.reference])
    wasted = 0
    for attempt in range(cfg.pretrain_restarts + 1):
        pol = EAPolicy(err_dim, cfg.ppo, child_seed(seed, "eap", "policy", attempt))
        run_seed = child_seed(seed, "eap", "pretrain", attempt)
        rng = stream(run_seed, "ppo", "rollout")
        check = min(cfg.pretrain_check, cfg.pretrain_iterations)
        _, log = ppo_train(task, check, cfg.ppo, seed=run_seed, rng=rng, agent=pol.agent,
                           actor=NominalActor(pol), refit_value=False)
        recent = [r["mean_return"] for r in log.rows[-5:]]
        if attempt == cfg.pretrain_restarts or check == 0 or np.nanmean(recent) >= cfg.pretrain_bar:
            break
        wasted += log.steps
    rest = cfg.pretrain_iterations - check
    _, log2 = ppo_train(task, rest, cfg.ppo, seed=run_seed, rng=rng, agent=pol.agent, actor=NominalActor(pol))
    for r in log2.rows:
        r["iteration"] += check
        r["steps"] += log.steps
    log.rows.extend(log2.rows)
    log.steps += log2.steps + wasted
    return pol, log


def train_eap(env_set: EnvSet, cfg: EAPConfig = None, seed=0, pretrained=None):
    """Pre-train on the reference, then alternate error-function and policy
    updates on environments sampled from the training set.

    Returns ``(policy, error_fn, rows)``; one metrics row per policy update
    after pre-training, with cumulative samples including error data.
    """
    cfg = cfg or EAPConfig()
    if pretrained is None:
        pol, log = pretrain_reference(env_set, cfg, seed)
        samples = log.steps
    else:
        pol, samples = pretrained
    E = ErrorFn(cfg.representation, cfg.bottleneck, cfg.error_hidden, seed=child_seed(seed, "eap", "errfn"),
                clip=cfg.error_clip)
    env_rng = stream(seed, "eap", "envs")
    err_rng = stream(seed, "eap", "errdata")
    fit_rng = stream(seed, "eap", "errfit")
    roll_rng = stream(seed, "eap", "rollout")
    upd_rng = stream(seed, "eap", "update")
    actor = EAPActor(pol, E, stream(seed, "eap", "aux"))
    ref_dyn = EnvSet.dyn(env_set.reference)
    data = ErrorData.empty()
    steps_per_env = cfg.ppo.batch_steps // cfg.ppo.n_envs
    # initial buffer: nominal rollouts in the reference environment
    ref_task = env_task([env_set.reference])
    warm = Runner(ref_task, cfg.ppo.n_envs, roll_rng)
    warm_actor = EAPActor(pol, ErrorFn(cfg.representation, cfg.bottleneck, cfg.error_hidden).zero_(),
                          stream(seed, "eap", "warm"))
    warm.collect(warm_actor, pol.agent.predict_value, steps_per_env, ref_task.gamma, cfg.ppo.gae_lambda)
    samples += cfg.ppo.batch_steps
    buffer = warm_actor.buffer()
    rows = []
    it = 0
    while samples < cfg.sample_budget:
        k = int(env_rng.integers(len(env_set.train)))
        pair = env_set.train[k]
        task = env_task([pair])
        runner = Runner(task, cfg.ppo.n_envs, roll_rng)
        for _ in range(cfg.updates_per_env):
            new = collect_error_data(pol, task, ref_dyn, EnvSet.dyn(pair), buffer, cfg.horizon,
                                     cfg.error_entries, err_rng)
            samples += 2 * cfg.horizon * cfg.error_entries
            data = data.extend(new, cfg.error_cap)
            rep = train_error_fn(E, data, cfg.error_epochs, fit_rng)
            actor.visited = []
            batch = runner.collect(actor, pol.agent.predict_value, steps_per_env, task.gamma, cfg.ppo.gae_lambda)
            samples += len(batch.returns)
            buffer = actor.buffer()
            pol.agent.update(batch, upd_rng)
            eps = batch.episodes
            rows.append({"iteration": it, "samples": samples, "env": k,
                         "mean_return": float(np.mean([e.ret for e in eps])) if eps else float("nan"),
                         "error_train_mse": rep["train_mse"][-1], "error_holdout_mse": rep["holdout_mse"][-1],
                         "log_std": float(np.mean(pol.policy.log_std))})
            it += 1
            if samples >= cfg.sample_budget:
                break
    return pol, E, rows


class ParamActor:
    """Policy input ``(obs, mu features, nu features)`` for the universal policy."""

    def __init__(self, agent):
        self.agent = agent
        self.in_dim = agent.policy.in_dim

    def __call__(self, obs, state, rng):
        x = up_inputs(obs, state)
        a, lp = self.agent.policy.sample(x, rng)
        return x, a, lp

    def bootstrap_input(self, obs, state):
        return up_inputs(obs, state)


def up_inputs(obs, state):
    dyn = state["dyn"]
    return np.concatenate([obs, mu_features(dyn[:, :3]), nu_features(dyn[:, 3:])], axis=1)


UP_INPUT_DIM = 5 + len(MU_FIELDS) + len(NU_FIELDS)


def train_dr(env_set: EnvSet, cfg: EAPConfig = None, seed=0):
    """Observation-only policy trained on episodes with dynamics drawn from
    the training set.  Returns ``(agent, log)``."""
    cfg = cfg or EAPConfig()
    task = env_task(env_set.train)
    iterations = max(0, int(np.ceil(cfg.sample_budget / cfg.ppo.batch_steps)))
    return ppo_train(task, iterations, cfg.ppo, seed=child_seed(seed, "dr"))


def train_up(env_set: EnvSet, cfg: EAPConfig = None, seed=0):
    """Policy conditioned on both ``mu`` and ``nu``.  Returns ``(agent, log)``."""
    cfg = cfg or EAPConfig()
    task = env_task(env_set.train)
    iterations = max(0, int(np.ceil(cfg.sample_budget / cfg.ppo.batch_steps)))
    agent = PPO(UP_INPUT_DIM, task.act_dim, cfg.ppo, child_seed(seed, "up"))
    return ppo_train(task, iterations, cfg.ppo, seed=child_seed(seed, "up"), agent=agent, actor=ParamActor(agent))


# ---------------------------------------------------------------- evaluation

class ZeroShotPolicy:
    """Deterministic controller ``(obs, state) -> action`` for one method."""

    KINDS = ("eap", "dr", "up", "nominal")

    def __init__(self, kind, net, log_std, err_dim=0, error_fn: ErrorFn = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown policy kind {kind!r}")
        self.kind, self.net, self.log_std = kind, net, np.asarray(log_std, float)
        self.err_dim, self.error_fn = err_dim, error_fn
        self.queries = 0

    def __call__(self, obs, state):
        if self.kind == "dr":
            return self.net(obs)
        if self.kind == "up":
            return self.net(up_inputs(obs, state))
        mu = state["dyn"][:, :3]
        x0 = np.concatenate([obs, mu_features(mu), np.zeros((len(obs), self.err_dim))], axis=1)
        a = self.net(x0)
        self.queries += 1
        if self.kind == "nominal":
            return a
        e = self.error_fn.policy_error(ErrorFn.inputs(state["s"], a, mu))
        self.queries += 1
        return self.net(np.concatenate([obs, mu_features(mu), e], axis=1))

    @classmethod
    def from_eap(cls, pol: EAPolicy, E: ErrorFn, kind="eap"):
        return cls(kind, pol.policy.net.copy(), pol.policy.log_std.copy(), pol.err_dim, E)

    @classmethod
    def from_agent(cls, kind, agent):
        return cls(kind, agent.policy.net.copy(), agent.policy.log_std.copy())

    def to_dict(self):
        return {"format_version": FORMAT_VERSION, "kind": self.kind, "err_dim": self.err_dim,
                "log_std": self.log_std.tolist(), "policy": net_to_dict(self.net.spec, self.net.params),
                "error_fn": None if self.error_fn is None else self.error_fn.to_dict()}

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {d.get('format_version')!r}")
        spec, params = net_from_dict(d["policy"])
        E = None if d["error_fn"] is None else ErrorFn.from_dict(d["error_fn"])
        return cls(d["kind"], MLP(spec, params), d["log_std"], d["err_dim"], E)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def env_returns(policy: ZeroShotPolicy, pair, probes, seed=0):
    """Mean undiscounted return from ``probes`` hanging starts in one environment.
    The start states depend only on ``seed``, so methods see identical probes."""
    task = env_task([pair])
    rng = stream(seed, "eap", "probes")
    starts = HANGING.sample(probes, rng)
    state = task.reset(probes, rng, states=starts)
    alive = np.ones(probes, dtype=bool)
    ret = np.zeros(probes)
    for _ in range(task.n_steps):
        a = policy(task.observe(state), state)
        state, r, term, trunc = task.step(state, a)
        ret += np.where(alive, r, 0.0)
        alive &= ~(term | trunc)
        if not alive.any():
            break
    return float(ret.mean())


def push_success_fn(policy: ZeroShotPolicy, pair, duration=4.0, speed_scale=(0.5, 1.0)):
    """Success of balancing after an upright start with a velocity push of
    ``magnitude`` along direction ``theta`` in the ``(xdot, phidot)`` plane."""
    task = env_task([pair], cfg=SwingupConfig(episode_time=duration))

    def fn(theta, mag, rng):
        n = len(theta)
        s = np.zeros((n, 4))
        s[:, 1] = speed_scale[0] * mag * np.cos(theta)
        s[:, 3] = speed_scale[1] * mag * np.sin(theta)
        state = task.reset(n, rng, states=s)
        for _ in range(task.n_steps):
            state, _, _, _ = task.step(state, policy(task.observe(state), state))
        return task.success(state)
    return fn


def evaluate_zero_shot(policy: ZeroShotPolicy, validation, probes=20, seed=0, stability=False,
                       stability_dirs=8):
    """Mean return per held-out environment and, optionally, a push-stability
    polygon per environment (``measure_roa`` over ``(xdot, phidot)`` pushes)."""
    out = {"returns": [env_returns(policy, pair, probes, seed) for pair in validation]}
    if stability:
        out["stability"] = [measure_roa(push_success_fn(policy, pair), stability_dirs, 1,
                                        stream(seed, "eap", "stability"), omega_max=8.0, resolution=0.125)
                            for pair in validation]
    return out


def normalize_returns(table):
    """``table[key] = returns per env`` -> returns divided by the best mean
    return any key achieved in that environment."""
    keys = list(table)
    R = np.array([table[k] for k in keys], dtype=np.float64)
    best = R.max(axis=0)
    best = np.where(best > 0, best, 1.0)
    return {k: (R[i] / best).tolist() for i, k in enumerate(keys)}
