"""Relay networks: a chain of policies, each trained to drive the system into
the region where its parent's value function exceeds a learned threshold.

The root policy solves the task from an easy start distribution.  Each new
node starts from a proposed state on the boundary of its parent's certified
region, moved as far toward the original start distribution as the
constraints allow, and is rewarded for handing over to the parent.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approx import MLP, NetSpec, load_net, save_net
from .envs.cartpole import HANGING, GaussianStart, SwingupTask, wrap_angle
from .ppo import PPOConfig, ppo_train, run_episodes
from .seeding import child_seed, stream

FORMAT_VERSION = 1


class ThresholdUndefined(ValueError):
    """All threshold probes share one label."""


class ProposalFailure(RuntimeError):
    pass


class RelayBuildError(RuntimeError):
    pass


# ----------------------------------------------------------------- threshold

def best_split(values, labels):
    """1-D threshold minimizing misclassification of ``good = value > split``.

    Candidate splits are midpoints between consecutive distinct sorted values
    plus one below the minimum and one above the maximum.  Returns
    ``(split, errors)``; ties go to the lowest split.
    """
    v = np.asarray(values, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    order = np.argsort(v, kind="stable")
    v, y = v[order], y[order]
    uniq, start = np.unique(v, return_index=True)
    good_at = np.add.reduceat(y.astype(int), start)
    bad_at = np.add.reduceat((~y).astype(int), start)
    # errors if split sits below uniq[i]: bad at/above i + good below i
    bad_above = np.concatenate([np.cumsum(bad_at[::-1])[::-1], [0]])
    good_below = np.concatenate([[0], np.cumsum(good_at)])
    errors = bad_above + good_below
    k = int(np.argmin(errors))
    if k == 0:
        split = uniq[0] - 1.0
    elif k == len(uniq):
        split = uniq[-1] + 1.0
    else:
        split = 0.5 * (uniq[k - 1] + uniq[k])
    return float(split), int(errors[k])


def compute_threshold_from_labels(values, labels):
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise ThresholdUndefined("threshold probes are all %s" % ("good" if y.all() else "bad"))
    return best_split(values, y)[0]


# ------------------------------------------------------------------- returns

def relay_return(rewards, cause, parent_value, parent_threshold, gamma, alpha=30.0):
    """Discounted return plus ``alpha * gamma**t_f * g`` with ``g`` the parent's
    value at the final state when it clears the threshold.  ``cause`` is
    ``"failure"``, ``"reached"`` or ``"timeout"``."""
    r = np.asarray(rewards, dtype=np.float64)
    t_f = r.size
    ret = float(np.sum(r * gamma ** np.arange(t_f)))
    if cause == "failure" or parent_value is None:
        return ret
    g = parent_value if parent_value > parent_threshold else 0.0
    return ret + alpha * gamma ** t_f * g


# ------------------------------------------------------------------ proposal

class StateValue:
    """Value of a raw state through the task's observation map."""

    def __init__(self, net: MLP, task, scale=1.0):
        self.net, self.task, self.scale = net, task, float(scale)

    def __call__(self, s):
        obs = self.task.observe_states(np.asarray(s, dtype=np.float64))
        return self.net(obs)[..., 0] * self.scale

    def grad(self, s):
        s = np.asarray(s, dtype=np.float64)
        g_obs = self.net.input_gradient(self.task.observe_states(s), np.ones(1))
        return self.scale * (self.task.observe_jacobian(s).T @ g_obs)


def propose_next_init(value, threshold, mu_orig, w, start, scales=None, lower=None, upper=None,
                      steps=600, lr=1.0, lr_final=1e-3, tol=1e-6):
    """Minimize ``V(s) + w * |(s - mu_orig) / scales|^2`` subject to
    ``V(s) >= threshold`` and box bounds, by normalized projected gradient
    descent from ``start`` in scaled coordinates.

    ``value(s)`` returns a scalar and ``value.grad(s)`` its gradient.  While
    the value constraint is active the descent direction is restricted to
    its tangent plane, so the result does not depend on the value's scale.
    Infeasible iterates are pulled back by Newton steps along the value
    gradient.  Raises :class:`ProposalFailure` when no feasible point is
    reached.
    """
    s0 = np.array(start, dtype=np.float64)
    scales = np.ones_like(s0) if scales is None else np.asarray(scales, dtype=np.float64)
    lo = np.full_like(s0, -np.inf) if lower is None else np.asarray(lower, float)
    hi = np.full_like(s0, np.inf) if upper is None else np.asarray(upper, float)
    z_mu = np.asarray(mu_orig, dtype=np.float64) / scales
    z_lo, z_hi = lo / scales, hi / scales

    def v_and_grad(z):
        s = z * scales
        return float(value(s)), value.grad(s) * scales

    def project(z):
        z = np.clip(z, z_lo, z_hi)
        for _ in range(100):
            v, g = v_and_grad(z)
            gap = threshold - v
            if gap <= 0.0:
                return z
            gn = float(g @ g)
            if gn == 0.0:
                break
            z = np.clip(z + (gap + tol) / gn * g, z_lo, z_hi)
        return z

    z = project(s0 / scales)
    active_band = 1e-6 * max(1.0, abs(threshold)) + 2.0 * tol
    decay = (lr_final / lr) ** (1.0 / max(1, steps - 1))
    step = lr
    for _ in range(steps):
        v, gv = v_and_grad(z)
        d = -(gv + 2.0 * w * (z - z_mu))
        gvn = np.linalg.norm(gv)
        if gvn > 0.0 and v - threshold <= active_band:
            n = gv / gvn
            dn = float(d @ n)
            if dn < 0.0:
                d = d - dn * n
        d = np.where(((z <= z_lo) & (d < 0)) | ((z >= z_hi) & (d > 0)), 0.0, d)
        dnorm = np.linalg.norm(d)
        if dnorm < 1e-12:
            break
        z = project(z + step * d / dnorm)
        step *= decay
    s = z * scales
    if value(s) < threshold - tol or np.any(s < lo - tol) or np.any(s > hi + tol):
        raise ProposalFailure("no feasible initial state found")
    return s


# --------------------------------------------------------------------- graph

@dataclass
class RelayNode:
    start: GaussianStart
    policy: MLP = None
    log_std: np.ndarray = None
    value: MLP = None
    value_scale: float = 1.0
    threshold: float = None
    parent: int = None      # index into the graph's node list; None for the root
    probe_start: GaussianStart = None   # distribution the threshold was fitted on

    def act(self, obs):
        return self.policy(obs)

    def v(self, obs):
        return self.value(obs)[..., 0] * self.value_scale


@dataclass
class RelayGraph:
    nodes: list = field(default_factory=list)
    alpha: float = 30.0
    w: float = 0.1
    log: list = field(default_factory=list)

    @property
    def param_count(self):
        return sum(n.policy.spec.param_count + n.value.spec.param_count for n in self.nodes)

    def node_task(self, k, base):
        """The training task of node ``k`` (its start distribution and parent hand-over)."""
        node = self.nodes[k]
        parent = None if node.parent is None else self.nodes[node.parent]
        return RelayTask(base, node.start, parent, self.alpha)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"format_version": FORMAT_VERSION, "alpha": self.alpha, "w": self.w,
                    "build_log": self.log, "nodes": []}
        for k, n in enumerate(self.nodes):
            save_net(n.policy.spec, n.policy.params, d / f"policy_{k}.json")
            save_net(n.value.spec, n.value.params, d / f"value_{k}.json")
            manifest["nodes"].append({"start": n.start.to_dict(), "threshold": n.threshold,
                                      "probe_start": n.probe_start.to_dict() if n.probe_start else None,
                                      "parent": n.parent, "value_scale": n.value_scale,
                                      "log_std": np.asarray(n.log_std).tolist(),
                                      "policy": f"policy_{k}.json", "value": f"value_{k}.json"})
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        if m.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported relay format_version {m.get('format_version')!r}")
        g = cls(alpha=m["alpha"], w=m["w"], log=m["build_log"])
        for e in m["nodes"]:
            g.nodes.append(RelayNode(GaussianStart.from_dict(e["start"]), MLP(*load_net(d / e["policy"])),
                                     np.asarray(e["log_std"]), MLP(*load_net(d / e["value"])),
                                     e["value_scale"], e["threshold"], e["parent"],
                                     GaussianStart.from_dict(e["probe_start"]) if e.get("probe_start") else None))
        return g


def execute(graph: RelayGraph, task, states, steps=None, trace=False):
    """Run the graph from each state in ``states`` (n, 4) with the base task.

    Control starts at the node with the highest value and is handed to the
    parent whenever the parent's value clears its threshold, checked every
    control step.  The root runs to the end of the episode.  Returns a dict
    with ``success``, ``failed``, ``ret``, final ``state`` and, if ``trace``,
    per-step active node indices and observations.
    """
    n = len(states)
    steps = task.n_steps if steps is None else steps
    # the rng only feeds the dynamics sampler; states are given
    state = task.reset(n, np.random.default_rng(0), states=states)
    obs = task.observe(state)
    values = np.stack([node.v(obs) for node in graph.nodes], axis=1)
    active = np.argmax(values, axis=1)
    alive = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    history, seen = [], []
    for t in range(steps):
        obs = task.observe(state)
        active = _hand_over(graph, obs, active)
        if trace:
            history.append(active.copy())
            seen.append(obs)
        a = np.zeros((n, task.act_dim))
        for k in np.unique(active[alive]):
            idx = np.flatnonzero(alive & (active == k))
            a[idx] = graph.nodes[k].act(obs[idx])
        nxt, r, term, _ = task.step(state, a)
        ret += np.where(alive, r, 0.0)
        alive &= ~term
        nxt["failed"] = ~alive
        state = nxt
    out = {"success": task.success(state) & alive, "failed": ~alive, "ret": ret, "state": state}
    if trace:
        out["trace"] = np.array(history)
        out["obs"] = np.array(seen)
    return out


def _hand_over(graph, obs, active):
    active = active.copy()
    for _ in range(len(graph.nodes)):
        moved = False
        for k, node in enumerate(graph.nodes):
            if node.parent is None:
                continue
            idx = np.flatnonzero(active == k)
            if idx.size == 0:
                continue
            parent = graph.nodes[node.parent]
            ok = parent.v(obs[idx]) > parent.threshold
            if np.any(ok):
                active[idx[ok]] = node.parent
                moved = True
        if not moved:
            break
    return active


# ---------------------------------------------------------------- relay task

class RelayTask:
    """The base task started from a node's distribution; reaching the
    parent's certified region terminates with the relay bonus."""

    def __init__(self, base: SwingupTask, start: GaussianStart, parent: RelayNode = None, alpha=30.0):
        self.base, self.start, self.parent, self.alpha = base, start, parent, alpha
        self.obs_dim, self.act_dim, self.gamma = base.obs_dim, base.act_dim, base.gamma
        self.n_steps = base.n_steps

    def reset(self, n, rng, states=None):
        s = self.start.sample(n, rng) if states is None else states
        st = self.base.reset(n, rng, states=s)
        st["reached"] = np.zeros(n, dtype=bool)
        return st

    def observe(self, state):
        return self.base.observe(state)

    def step(self, state, action, rng=None):
        nxt, r, failed, trunc = self.base.step(state, action, rng)
        reached = np.zeros_like(failed)
        if self.parent is not None:
            vp = self.parent.v(self.base.observe(nxt))
            reached = (vp > self.parent.threshold) & ~failed
            # bonus alpha * gamma**t_f * V_parent, paid on the step that reaches t_f
            r = r + np.where(reached, self.gamma * self.alpha * vp, 0.0)
        nxt["reached"] = reached
        return nxt, r, failed | reached, trunc & ~reached

    def success(self, state):
        if self.parent is None:
            return self.base.success(state)
        return state["reached"] & ~state["failed"]


def label_rollouts(task: RelayTask, policy_fn, starts, rule="success"):
    """Deterministic rollouts from ``starts``; returns ``(labels, returns)``.

    ``rule="success"`` labels a rollout good when the task's success test
    holds at its end (for a child: it reached the parent's region).
    ``rule="return"`` labels it good when it did not fail and its discounted
    return is at least the mean return of the rollouts that did not fail.
    """
    out = run_episodes(_FixedStarts(task, starts), policy_fn, len(starts), np.random.default_rng(0))
    ret = out["disc_ret"]
    if rule == "success":
        return out["success"].copy(), ret
    if rule != "return":
        raise ValueError(f"unknown label rule {rule!r}")
    failed = out["final"]["failed"]
    if failed.all():
        return np.zeros(len(starts), dtype=bool), ret
    bar = float(np.mean(ret[~failed]))
    return (~failed) & (ret >= bar), ret


class _FixedStarts:
    def __init__(self, task, starts):
        self.task, self.starts = task, np.asarray(starts)
        self.gamma = task.gamma

    def reset(self, n, rng):
        return self.task.reset(n, rng, states=self.starts[:n])

    def __getattr__(self, name):
        return getattr(self.task, name)


def compute_threshold(node: RelayNode, task: RelayTask, n_probes, inflation, rng, max_inflations=30,
                      max_success=1.0, rule="success"):
    """Threshold on the node's value separating probe starts that succeed from
    those that do not.  Probes come from the node's start distribution with
    its covariance inflated by ``inflation``; while the probe success rate is
    at least ``max_success`` (default: all succeed) the covariance is inflated
    again.  Returns ``(threshold, values, labels, probe_distribution)``."""
    if n_probes < 20:
        raise ValueError("need at least 20 threshold probes")
    dist = node.start.inflated(inflation)
    for _ in range(max_inflations):
        starts = dist.sample(n_probes, rng)
        labels, _ = label_rollouts(task, _policy_fn(node.policy), starts, rule)
        values = node.v(task.base.observe_states(starts))
        if labels.all() or labels.mean() >= max_success:
            dist = dist.inflated(inflation)
            continue
        return compute_threshold_from_labels(values, labels), values, labels, dist
    raise ThresholdUndefined("threshold probes never produced enough failures")


def _policy_fn(net):
    return lambda obs, state=None: net(obs)


@dataclass
class RelayConfig:
    alpha: float = 30.0
    w: float = 0.1
    max_nodes: int = 6
    root_iterations: int = 100
    node_iterations: int = 100
    threshold_probes: int = 100
    inflation: float = 1.5
    probe_max_success: float = 0.8  # inflate probes while this share or more is good
    label_rule: str = "success"
    success_episodes: int = 50
    success_rate: float = 0.9
    execute_time: float = 6.0
    # nodes train from N(mean, diag(node_std**2)); a tight start leaves the
    # threshold probes without failures
    node_std: tuple = (0.2, 0.2, 0.6, 0.8)
    root_start: GaussianStart = field(default_factory=lambda: GaussianStart.diagonal([0.0] * 4, (0.1, 0.1, 0.2, 0.3)))
    angle_dims: tuple = (2,)        # periodic state dimensions
    target_start: GaussianStart = field(default_factory=lambda: HANGING)
    # box constraint on proposed states: |x| <= 0.5 m, |xdot| <= 2 m/s, |phidot| <= 4 rad/s
    state_lower: tuple = (-0.5, -2.0, -np.inf, -4.0)
    state_upper: tuple = (0.5, 2.0, np.inf, 4.0)
    state_scales: tuple = None      # proposal distance units; default: target start std
    refit_episodes: int = 400
    refit_start: GaussianStart = field(
        default_factory=lambda: GaussianStart.diagonal([0.0, 0.0, np.pi, 0.0], (1.0, 1.5, np.pi, 4.0)))
    ppo: PPOConfig = field(default_factory=PPOConfig)


def mc_value_data(task, policy, starts, rng, stride=4):
    """Visited observations and discounted Monte-Carlo returns of the
    stochastic ``policy`` from each start; every ``stride``-th step kept.
    Returns ``(obs, returns, steps_simulated)``."""
    n = len(starts)
    state = task.reset(n, rng, states=starts)
    alive = np.ones(n, dtype=bool)
    O, R, M = [], [], []
    for _ in range(task.n_steps):
        obs = task.observe(state)
        a, _ = policy.sample(obs, rng)
        state, r, term, trunc = task.step(state, a, rng)
        O.append(obs); R.append(np.where(alive, r, 0.0)); M.append(alive.copy())
        alive &= ~(term | trunc)
        if not alive.any():
            break
    R, M = np.array(R), np.array(M)
    G = np.zeros_like(R)
    g = np.zeros(n)
    for t in range(len(R) - 1, -1, -1):
        g = R[t] + task.gamma * g
        G[t] = g
    keep = M.copy()
    keep[np.arange(len(R)) % stride != 0] = False
    return np.array(O)[keep], G[keep], int(M.sum())


def _train_node(task, iterations, cfg: RelayConfig, seed, value_scale):
    pc = PPOConfig(**{**cfg.ppo.__dict__, "value_scale": value_scale})
    agent, log = ppo_train(task, iterations, pc, seed=seed, refit_value=cfg.refit_episodes == 0)
    steps = log.steps
    if cfg.refit_episodes > 0 and log.last_batch is not None:
        # calibrate the value away from the training starts too, where children hand over
        rng = stream(seed, "relay", "refit")
        starts = cfg.refit_start.sample(cfg.refit_episodes, rng)
        obs, G, used = mc_value_data(task, agent.policy, starts, rng)
        last = log.last_batch
        agent.refit_value(np.concatenate([last.inputs, obs]), np.concatenate([last.returns, G]), rng)
        steps += used
    return agent, steps


def build_relay(cfg: RelayConfig = None, base: SwingupTask = None, seed=0, log=None):
    """Grow a relay chain until executing it from the target distribution
    succeeds at ``cfg.success_rate``.  Returns ``(graph, samples_used)``."""
    cfg = cfg or RelayConfig()
    base = base or SwingupTask()
    exec_task = SwingupTask(base.p, base.cfg, base.start, base.dyn_sampler)
    exec_steps = int(round(cfg.execute_time / base.cfg.control_dt))
    graph = RelayGraph(alpha=cfg.alpha, w=cfg.w)
    eval_rng = stream(seed, "relay", "evaluate")
    thr_rng = stream(seed, "relay", "threshold")
    samples = 0
    start, parent = cfg.root_start, None
    while True:
        k = len(graph.nodes)
        if k >= cfg.max_nodes:
            err = RelayBuildError(f"relay chain exceeded {cfg.max_nodes} nodes; log: {graph.log}")
            err.graph = graph
            raise err
        parent_node = graph.nodes[parent] if parent is not None else None
        task = RelayTask(base, start, parent_node, cfg.alpha)
        scale = 1.0 if parent_node is None else max(1.0, cfg.alpha * abs(parent_node.threshold))
        iters = cfg.root_iterations if parent is None else cfg.node_iterations
        t0 = time.monotonic()
        agent, used = _train_node(task, iters, cfg, child_seed(seed, "relay", "node", k), scale)
        samples += used
        node = RelayNode(start, agent.policy.net, agent.policy.log_std.copy(), agent.value, scale, None, parent)
        node.threshold, _, labels, node.probe_start = compute_threshold(node, task, cfg.threshold_probes, cfg.inflation, thr_rng,
                                                      max_success=cfg.probe_max_success, rule=cfg.label_rule)
        graph.nodes.append(node)
        rate = float(np.mean(execute(graph, exec_task, cfg.target_start.sample(cfg.success_episodes, eval_rng),
                                     exec_steps)["success"]))
        entry = {"node": k, "parent": parent, "start_mean": start.mean.tolist(), "threshold": node.threshold,
                 "probe_success": float(np.mean(labels)), "graph_success": rate, "samples": samples,
                 "train_time_s": time.monotonic() - t0}
        graph.log.append(entry)
        if log:
            log(entry)
        if rate >= cfg.success_rate:
            return graph, samples
        value = StateValue(node.value, base, node.value_scale)
        scales = np.sqrt(np.diag(cfg.target_start.cov)) if cfg.state_scales is None else cfg.state_scales
        target = cfg.target_start.mean.copy()
        for i in cfg.angle_dims:
            # nearest periodic image of the target angle
            target[i] = start.mean[i] + wrap_angle(target[i] - start.mean[i])
        try:
            mean = propose_next_init(value, node.threshold, target, cfg.w, start.mean,
                                     np.asarray(scales), np.asarray(cfg.state_lower),
                                     np.asarray(cfg.state_upper))
        except ProposalFailure as exc:
            err = RelayBuildError(f"proposal for node {k + 1} failed ({exc}); log: {graph.log}")
            err.graph = graph
            raise err from exc
        start = GaussianStart.diagonal(mean, cfg.node_std)
        parent = k


def one_hidden_width(target_params, in_dim, out_dim, layers=2):
    """Width of a ``layers``-deep tanh net whose parameter count is closest to ``target_params``."""
    best, best_err = 1, None
    for h in range(1, 4096):
        n = NetSpec(in_dim, (h,) * layers, out_dim).param_count
        err = abs(n - target_params)
        if best_err is None or err < best_err:
            best, best_err = h, err
        if n > target_params:
            break
    return best


def train_one(samples, param_count, base: SwingupTask = None, ppo: PPOConfig = None, seed=0):
    """Single policy from the target distribution with a matched sample
    budget and total parameter count (policy plus value net)."""
    base = base or SwingupTask()
    ppo = ppo or PPOConfig()
    per_net = param_count / 2
    h = one_hidden_width(per_net, base.obs_dim, base.act_dim)
    pc = PPOConfig(**{**ppo.__dict__, "hidden": (h, h)})
    iterations = max(1, int(round(samples / pc.batch_steps)))
    agent, log = ppo_train(base, iterations, pc, seed=child_seed(seed, "relay", "one"))
    node = RelayNode(base.start, agent.policy.net, agent.policy.log_std.copy(), agent.value, 1.0, None, None)
    return RelayGraph(nodes=[node]), log.steps


def threshold_accuracy(node: RelayNode, task: RelayTask, n, rng, rule="success"):
    """Accuracy of ``V(s0) > threshold`` as a predictor of the probe label on
    fresh probes from the distribution the threshold was fitted on."""
    starts = node.probe_start.sample(n, rng)
    labels, _ = label_rollouts(task, _policy_fn(node.policy), starts, rule)
    pred = node.v(task.base.observe_states(starts)) > node.threshold
    return float(np.mean(pred == labels))
