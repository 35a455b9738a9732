"""Mixture of actor-critic experts for contact planning during a fall.

Each body part owns a critic (value of choosing that part as the next
contact) and an actor (continuous action given that choice).  Critics share
one tanh input layer; actors are independent.  Updates follow CACLA: critics
regress on min-composed targets, actors move toward explored actions only
when the target beats the current best value.
"""
from __future__ import annotations

import csv
import json
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import approx
from .approx import MLP, NetSpec, OptimizerState, optimizer_step
from .dp import ReplayTuple
from .envs import fall as F
from .envs.fall import (AbstractFallState, FallAction, FallInitDist, FallModelParams,
                        starts_halted)
from .seeding import child_seed, stream

STATE_SHIFT = np.array([0.0, 0.14, 0.0, 0.0, 0.0])
STATE_SCALE = np.array([1.0, 0.11, 1.0, 1.0, 8.0])


@dataclass
class MaceConfig:
    gamma: float = 0.9
    learning_rate: float = 1e-4
    minibatch: int = 32
    rollouts_per_iter: int = 10
    temperature0: float = 5.0
    anneal_iters: int = 250
    noise_std: float = 0.1
    buffer_capacity: int = 100_000
    target_sync: int = 200
    updates_per_iter: int = 20
    iterations: int = 1000
    seed_tuples: int = 5000
    max_contacts: int = 6
    probe_states: int = 10
    critic_trunk: int = 32
    critic_hidden: tuple = (32,)
    actor_hidden: tuple = (128, 128, 128)

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.temperature0 < 0:
            raise ValueError("temperature must be >= 0")
        if self.minibatch < 1 or self.buffer_capacity < 1:
            raise ValueError("minibatch and buffer capacity must be >= 1")
        self.critic_hidden = tuple(self.critic_hidden)
        self.actor_hidden = tuple(self.actor_hidden)

    def temperature(self, iteration):
        if self.anneal_iters <= 0:
            return 0.0
        return max(0.0, self.temperature0 * (1.0 - iteration / self.anneal_iters))


def select_actor(values, T, rng=None):
    """Boltzmann choice over critic values; greedy (lowest index on ties) when ``T == 0``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise ValueError("need at least one value")
    if T == 0:
        return int(np.argmax(values))
    p = boltzmann_probs(values, T)
    return int(rng.choice(values.size, p=p))


def boltzmann_probs(values, T):
    z = (np.asarray(values, dtype=np.float64) - np.max(values)) / T
    e = np.exp(z)
    return e / e.sum()


def critic_target(r, next_values_max, terminal, gamma):
    """``min(r, gamma * max_j target_j(s'))``; the reward itself at terminal outcomes."""
    if terminal:
        return float(r)
    return float(min(r, gamma * next_values_max))


def encode_state(s, n_parts):
    """Fixed affine scaling of ``(c1, r1, theta1, rdot1, thetadot1)`` rows."""
    x = np.atleast_2d(np.asarray(s, dtype=np.float64)).copy()
    x[:, 0] = 2.0 * x[:, 0] / (n_parts - 1) - 1.0 if n_parts > 1 else 0.0
    return (x - STATE_SHIFT) / STATE_SCALE


class ActionMap:
    """Affine map between normalized actions in [-1, 1]^3 and physical per-part bounds."""

    def __init__(self, params: FallModelParams):
        self.lo = np.array([[params.theta2_bounds[0], bp.delta_min, params.rdot_bounds[0]]
                            for bp in params.parts])
        self.hi = np.array([[params.theta2_bounds[1], bp.delta_max, params.rdot_bounds[1]]
                            for bp in params.parts])

    def to_physical(self, part, u):
        u = np.clip(u, -1.0, 1.0)
        v = self.lo[part] + 0.5 * (u + 1.0) * (self.hi[part] - self.lo[part])
        return FallAction(*map(float, v))

    def to_normalized(self, part, a: FallAction):
        span = self.hi[part] - self.lo[part]
        u = 2.0 * (a.as_array() - self.lo[part]) / np.where(span > 0, span, 1.0) - 1.0
        return np.clip(u, -1.0, 1.0)


class MaceNet:
    """Critic trunk plus per-part critic heads, per-part actors and target critics."""

    def __init__(self, n_parts, config: MaceConfig = None, seed=0):
        cfg = config or MaceConfig()
        self.n_parts = n_parts
        self.trunk = MLP(NetSpec(5, (), cfg.critic_trunk, output_activation="tanh",
                                 seed=child_seed(seed, "trunk")))
        self.heads = [MLP(NetSpec(cfg.critic_trunk, cfg.critic_hidden, 1, seed=child_seed(seed, "head", i)))
                      for i in range(n_parts)]
        self.actors = [MLP(NetSpec(5, cfg.actor_hidden, 3, output_activation="tanh",
                                   seed=child_seed(seed, "actor", i)))
                       for i in range(n_parts)]
        self.sync_target()

    def sync_target(self):
        self.target_trunk = approx.target_sync(self.trunk.params, None)
        self.target_heads = [approx.target_sync(h.params, None) for h in self.heads]

    def values(self, x, target=False):
        """Critic values for encoded states ``x`` (n, 5) -> (n, n_parts)."""
        if target:
            z = approx.forward(self.trunk.spec, self.target_trunk, x)
            return np.concatenate([approx.forward(h.spec, p, z) for h, p in zip(self.heads, self.target_heads)],
                                  axis=1)
        z = self.trunk(x)
        return np.concatenate([h(z) for h in self.heads], axis=1)

    def actor_output(self, part, x):
        return self.actors[part](x)

    def param_vectors(self):
        return ([self.trunk.params] + [h.params for h in self.heads] + [a.params for a in self.actors])

    def copy(self):
        other = object.__new__(MaceNet)
        other.n_parts = self.n_parts
        other.trunk = self.trunk.copy()
        other.heads = [h.copy() for h in self.heads]
        other.actors = [a.copy() for a in self.actors]
        other.target_trunk = self.target_trunk.copy()
        other.target_heads = [t.copy() for t in self.target_heads]
        return other

    def to_dict(self):
        return {"format_version": 1, "n_parts": self.n_parts,
                "trunk": approx.net_to_dict(self.trunk.spec, self.trunk.params),
                "heads": [approx.net_to_dict(h.spec, h.params) for h in self.heads],
                "actors": [approx.net_to_dict(a.spec, a.params) for a in self.actors]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != 1:
            raise approx.NetFormatError("unsupported MACE file version")
        net = object.__new__(cls)
        net.n_parts = int(d["n_parts"])
        net.trunk = MLP(*approx.net_from_dict(d["trunk"]))
        net.heads = [MLP(*approx.net_from_dict(h)) for h in d["heads"]]
        net.actors = [MLP(*approx.net_from_dict(a)) for a in d["actors"]]
        net.sync_target()
        return net

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def act(net: MaceNet, s: AbstractFallState, amap: ActionMap):
    """Greedy execution: the part with the highest critic and its actor's clamped action."""
    x = encode_state(s.as_array(), net.n_parts)
    c = int(np.argmax(net.values(x)[0]))
    return c, amap.to_physical(c, net.actor_output(c, x)[0])


class Learner:
    """Optimizer state for a MaceNet; one Adam state per parameter block."""

    def __init__(self, net: MaceNet, config: MaceConfig, amap: ActionMap):
        self.net = net
        self.cfg = config
        self.amap = amap
        lr = config.learning_rate
        self.opt_trunk = OptimizerState("adam", lr, net.trunk.spec.param_count)
        self.opt_heads = [OptimizerState("adam", lr, h.spec.param_count) for h in net.heads]
        self.opt_actors = [OptimizerState("adam", lr, a.spec.param_count) for a in net.actors]
        self.n_updates = 0

    def targets(self, batch):
        cfg = self.cfg
        n = self.net.n_parts
        xs_next = encode_state(np.array([t.s_next.as_array() for t in batch]), n)
        vmax = self.net.values(xs_next, target=True).max(axis=1)
        return np.array([critic_target(t.r, v, t.terminal, cfg.gamma) for t, v in zip(batch, vmax)])

    def update_critic(self, batch, y=None):
        """Move each tuple's chosen critic toward its target (gradient averaged over the batch)."""
        net = self.net
        y = self.targets(batch) if y is None else y
        xs = encode_state(np.array([t.s.as_array() for t in batch]), net.n_parts)
        cs = np.array([t.c for t in batch])
        z, tcache = net.trunk.forward_cache(xs)
        gz = np.zeros_like(z)
        m = len(batch)
        for i, head in enumerate(net.heads):
            rows = cs == i
            if not rows.any():
                continue
            # full-batch forward so V matches net.values bit for bit (zero TD stays zero)
            v, cache = head.forward_cache(z)
            td = np.where(rows, y - v[:, 0], 0.0)[:, None] / m
            g, gin = head.backward(cache, td, need_input=True)
            gz[rows] = gin[rows]
            if np.any(g != 0.0):
                head.params = optimizer_step(self.opt_heads[i], head.params, g, ascend=True)
        gt = net.trunk.backward(tcache, gz)
        if np.any(gt != 0.0):
            net.trunk.params = optimizer_step(self.opt_trunk, net.trunk.params, gt, ascend=True)
        self._count_update()
        return y

    def update_actor(self, batch, y_next=None):
        """CACLA step: actors chase the explored action where the target exceeds the best value."""
        net = self.net
        amap = self.amap
        y_next = self.targets(batch) if y_next is None else y_next
        xs = encode_state(np.array([t.s.as_array() for t in batch]), net.n_parts)
        best = net.values(xs).max(axis=1)
        passing = y_next > best
        m = len(batch)
        cs = np.array([t.c for t in batch])
        for i, actor in enumerate(net.actors):
            rows = np.flatnonzero(passing & (cs == i))
            if rows.size == 0:
                continue
            targets = np.array([amap.to_normalized(i, batch[k].a) for k in rows])
            out, cache = actor.forward_cache(xs[rows])
            g = actor.backward(cache, (targets - out) / m)
            if np.any(g != 0.0):
                actor.params = optimizer_step(self.opt_actors[i], actor.params, g, ascend=True)
        return passing

    def _count_update(self):
        self.n_updates += 1
        if self.cfg.target_sync > 0 and self.n_updates % self.cfg.target_sync == 0:
            self.net.sync_target()


def explore_rollout(net, s0, params, amap, cfg, T, rng):
    """One exploratory fall; returns the list of tuples, one per contact (or halt)."""
    tuples = []
    s = s0
    for _ in range(cfg.max_contacts):
        if starts_halted(s.thetadot1, s.theta1):
            break
        x = encode_state(s.as_array(), net.n_parts)
        c = select_actor(net.values(x)[0], T, rng)
        u = net.actor_output(c, x)[0]
        if cfg.noise_std > 0:
            u = u + rng.normal(0.0, cfg.noise_std, size=3)
        a = amap.to_physical(c, u)
        o = F.fall_simulate_to_next_contact(params, s, c, a)
        if o.halted:
            tuples.append(ReplayTuple(s, a, s, 1.0, c, True))
            break
        tuples.append(ReplayTuple(s, a, o.state, o.reward, c, o.torso))
        if o.torso:
            break
        s = o.state
    return tuples


def policy_controller(net, amap):
    return lambda s: act(net, s, amap)


def evaluate(net, states, params, amap, max_contacts=6):
    """Min reward of the greedy policy's fall from each state."""
    ctrl = policy_controller(net, amap)
    return np.array([F.run_fall_episode(params, s, ctrl, max_contacts).min_reward for s in states])


@dataclass
class TrainResult:
    net: MaceNet
    metrics: list = field(default_factory=list)     # dict rows
    timing: list = field(default_factory=list)


def train(params: FallModelParams, config: MaceConfig, seed_tuples, seed=0,
          init_dist: FallInitDist = None, log=None):
    """Run MACE training; returns the trained net and per-iteration metrics."""
    cfg = config
    init_dist = init_dist or FallInitDist()
    net = MaceNet(params.n_parts, cfg, seed)
    amap = ActionMap(params)
    learner = Learner(net, cfg, amap)
    buf = deque(seed_tuples, maxlen=cfg.buffer_capacity)
    probe_rng = stream(seed, "mace", "probe")
    probe = [init_dist.sample(params, probe_rng, falling_only=True) for _ in range(cfg.probe_states)]
    explore_rng = stream(seed, "mace", "explore")
    batch_rng = stream(seed, "mace", "minibatch")
    res = TrainResult(net)
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        T = cfg.temperature(it)
        for _ in range(cfg.rollouts_per_iter):
            s0 = init_dist.sample(params, explore_rng, falling_only=True)
            buf.extend(explore_rollout(net, s0, params, amap, cfg, T, explore_rng))
        if len(buf) >= cfg.minibatch:
            for _ in range(cfg.updates_per_iter):
                idx = batch_rng.integers(0, len(buf), size=cfg.minibatch)
                batch = [buf[k] for k in idx]
                y = learner.targets(batch)
                learner.update_critic(batch, y)
                learner.update_actor(batch, y)
        avg = float(np.mean(evaluate(net, probe, params, amap, cfg.max_contacts))) if probe else float("nan")
        res.metrics.append({"iteration": it, "avg_probe_reward": avg, "buffer_size": len(buf)})
        res.timing.append({"iteration": it, "wall_time_s": time.perf_counter() - t0})
        if log is not None:
            log(res.metrics[-1])
    return res


def write_metrics(rows, path, fields=("iteration", "avg_probe_reward", "buffer_size")):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})
