"""Adaptive perturbation curricula driven by a polygonal region of attraction.

The region of attraction (RoA) is stored as magnitudes on ``M`` fixed,
evenly spaced push directions.  Training samples pushes around the current
boundary and grows or shrinks each direction from its observed success rate.
The controller being trained is a residual on top of an LQR balancer (or a
plain policy for the pure-RL ablation).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .envs.balancer import (BalancerParams, balance_reward, balancer_step, lqr_action,
                            lqr_gain, outside_support)
from .ppo import PPO, PPOConfig, ppo_train
from .seeding import stream

TWO_PI = 2.0 * np.pi


@dataclass
class RoAPolygon:
    magnitudes: np.ndarray
    n_good: np.ndarray = None
    n_bad: np.ndarray = None

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        M = self.magnitudes.size
        if M < 3:
            raise ValueError("a RoA polygon needs at least 3 directions")
        if np.any(self.magnitudes < 0):
            raise ValueError("RoA magnitudes must be >= 0")
        self.n_good = np.zeros(M, dtype=int) if self.n_good is None else np.asarray(self.n_good)
        self.n_bad = np.zeros(M, dtype=int) if self.n_bad is None else np.asarray(self.n_bad)

    @classmethod
    def uniform(cls, M, magnitude):
        return cls(np.full(M, float(magnitude)))

    @property
    def M(self):
        return self.magnitudes.size

    @property
    def angles(self):
        return TWO_PI * np.arange(self.M) / self.M

    def nearest(self, theta):
        return np.rint(np.mod(theta, TWO_PI) / (TWO_PI / self.M)).astype(int) % self.M

    def record(self, theta, success):
        i = self.nearest(np.atleast_1d(theta))
        s = np.atleast_1d(success).astype(bool)
        np.add.at(self.n_good, i[s], 1)
        np.add.at(self.n_bad, i[~s], 1)

    def copy(self):
        return RoAPolygon(self.magnitudes.copy(), self.n_good.copy(), self.n_bad.copy())


@dataclass
class CurriculumConfig:
    M: int = 8
    initial_magnitude: float = 5.0
    update_period: int = 4
    k_low: float = 0.8
    k_high: float = 1.1
    success_threshold: float = 0.9
    alpha_min: float = 0.8
    alpha_max: float = 1.1

    def __post_init__(self):
        if not self.k_low <= 1.0 <= self.k_high:
            raise ValueError("need k_low <= 1 <= k_high")
        if not 0.0 < self.success_threshold < 1.0:
            raise ValueError("success threshold must lie in (0, 1)")
        if not self.alpha_min <= 1.0 <= self.alpha_max:
            raise ValueError("need alpha_min <= 1 <= alpha_max")


def roa_magnitude(roa: RoAPolygon, theta):
    """Magnitude at ``theta`` by linear interpolation in angle between neighbouring vertices."""
    step = TWO_PI / roa.M
    u = np.mod(np.asarray(theta, dtype=np.float64), TWO_PI) / step
    i = np.floor(u).astype(int) % roa.M
    frac = u - np.floor(u)
    return (1.0 - frac) * roa.magnitudes[i] + frac * roa.magnitudes[(i + 1) % roa.M]


def sample_perturbation(roa: RoAPolygon, cfg: CurriculumConfig, rng, n=None):
    """Direction uniform on the circle, magnitude uniform in the band around the boundary."""
    size = 1 if n is None else n
    theta = rng.uniform(0.0, TWO_PI, size=size)
    f = roa_magnitude(roa, theta)
    mag = rng.uniform(cfg.k_low * f, cfg.k_high * f)
    if n is None:
        return float(theta[0]), float(mag[0])
    return theta, mag


def f_alpha(rate, cfg: CurriculumConfig):
    """Piecewise-linear growth factor through (0, alpha_min), (threshold, 1), (1, alpha_max)."""
    return np.interp(rate, [0.0, cfg.success_threshold, 1.0], [cfg.alpha_min, 1.0, cfg.alpha_max])


def update_roa(roa: RoAPolygon, cfg: CurriculumConfig):
    out = roa.copy()
    n = out.n_good + out.n_bad
    seen = n > 0
    rate = np.where(seen, out.n_good / np.maximum(n, 1), 0.0)
    out.magnitudes = np.where(seen, f_alpha(rate, cfg) * out.magnitudes, out.magnitudes)
    out.n_good = np.zeros_like(out.n_good)
    out.n_bad = np.zeros_like(out.n_bad)
    return out


def roa_area(roa_or_mags):
    """Shoelace area of the polar polygon with vertices at evenly spaced angles."""
    m = roa_or_mags.magnitudes if isinstance(roa_or_mags, RoAPolygon) else np.asarray(roa_or_mags, float)
    M = m.size
    return 0.5 * np.sin(TWO_PI / M) * float(np.sum(m * np.roll(m, -1)))


def measure_roa(success_fn, M, trials, rng, omega_max=64.0, resolution=0.25, threshold=0.9):
    """Largest magnitude per direction whose success rate reaches ``threshold``.

    ``success_fn(theta, magnitude, rng) -> bool array`` evaluates one trial
    per entry.  All directions are bisected together; each probe runs
    ``trials`` trials.  Returns a :class:`RoAPolygon`.
    """
    angles = TWO_PI * np.arange(M) / M

    def passes(mags):
        th = np.repeat(angles, trials)
        mg = np.repeat(mags, trials)
        ok = np.asarray(success_fn(th, mg, rng)).reshape(M, trials)
        return ok.mean(axis=1) >= threshold

    lo = np.zeros(M)
    hi = np.full(M, float(omega_max))
    at_zero = passes(lo)
    at_max = passes(hi)
    while np.any(hi - lo > resolution):
        mid = 0.5 * (lo + hi)
        ok = passes(mid)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    result = np.where(at_max, omega_max, np.where(at_zero, lo, 0.0))
    return RoAPolygon(result)


@dataclass
class BalanceTaskConfig:
    episode_time: float = 2.0
    onset_range: tuple = (0.05, 0.3)
    duration: float = 0.2
    init_noise: float = 0.005
    w_p: float = 100.0
    w_d: float = 10.0
    alive_bonus: float = 1.0        # per-step reward is alive_bonus + max(penalty, -alive_bonus)
    fail_penalty: float = 10.0
    success_pos: float = 0.05
    success_vel: float = 0.05
    residual_bound: float = None    # defaults to the actuator force limit
    gamma: float = 0.99


class BalanceTask:
    """Vectorized push-recovery episodes on the planar balancer.

    ``residual=True`` adds the policy output (scaled by ``residual_bound``)
    to the LQR force; otherwise the policy commands the full force range.
    The push sampler is replaceable: ``sampler(n, rng) -> (theta, magnitude)``.
    """

    obs_dim = 4
    act_dim = 2

    def __init__(self, params: BalancerParams = None, cfg: BalanceTaskConfig = None,
                 residual=True, K=None, sampler=None):
        self.p = params or BalancerParams()
        self.cfg = cfg or BalanceTaskConfig()
        self.residual = residual
        self.K = lqr_gain(self.p) if K is None else np.asarray(K)
        self.sampler = sampler or (lambda n, rng: (rng.uniform(0, TWO_PI, n), np.zeros(n)))
        self.gamma = self.cfg.gamma
        self.n_steps = int(round(self.cfg.episode_time / self.p.control_dt))
        bound = self.cfg.residual_bound if self.cfg.residual_bound is not None else self.p.force_limit
        self.action_scale = bound if residual else self.p.force_limit

    def reset(self, n, rng, theta=None, magnitude=None):
        c = self.cfg
        if theta is None:
            theta, magnitude = self.sampler(n, rng)
        onset = rng.uniform(*c.onset_range, size=n)
        C = rng.normal(0.0, c.init_noise, size=(n, 2)) + np.asarray(self.p.target)
        return {"C": C, "V": np.zeros((n, 2)), "k": np.zeros(n, dtype=int),
                "theta": np.asarray(theta, float), "mag": np.asarray(magnitude, float),
                "onset": onset, "dur": np.full(n, c.duration), "failed": np.zeros(n, bool)}

    def observe(self, s):
        return np.concatenate([(s["C"] - np.asarray(self.p.target)) / 0.1, s["V"] / 0.5], axis=1)

    def force(self, s, action):
        u = np.clip(action, -1.0, 1.0) * self.action_scale
        if self.residual:
            u = lqr_action(self.K, s["C"], s["V"], self.p.target) + u
        return u

    def step(self, s, action, rng=None):
        p = self.p
        u = self.force(s, action)
        C, V = s["C"], s["V"]
        t0 = s["k"] * p.control_dt
        pert = (s["theta"], s["mag"], s["onset"], s["dur"])
        for j in range(p.substeps):
            C, V = balancer_step(p, C, V, u, pert, t0 + j * p.dt)
        k = s["k"] + 1
        failed = outside_support(p, C)
        pen = balance_reward(C, V, self.cfg.w_p, self.cfg.w_d, p.target)
        r = self.cfg.alive_bonus + np.maximum(pen, -self.cfg.alive_bonus)
        r = np.where(failed, r - self.cfg.fail_penalty, r)
        nxt = dict(s, C=C, V=V, k=k, failed=failed)
        trunc = (k >= self.n_steps) & ~failed
        return nxt, r, failed, trunc

    def success(self, s):
        d = np.linalg.norm(s["C"] - np.asarray(self.p.target), axis=1)
        v = np.linalg.norm(s["V"], axis=1)
        return (d < self.cfg.success_pos) & (v < self.cfg.success_vel) & ~s["failed"]

    def episode_info(self, s):
        return [{"theta": float(t), "mag": float(m)} for t, m in zip(s["theta"], s["mag"])]


def balance_success_fn(task: BalanceTask, policy_fn):
    """Adapter for :func:`measure_roa`: one deterministic episode per (theta, magnitude)."""
    def fn(theta, mag, rng):
        state = task.reset(len(theta), rng, theta, mag)
        alive = np.ones(len(theta), bool)
        for _ in range(task.n_steps):
            a = policy_fn(task.observe(state), state)
            state, _, term, trunc = task.step(state, a)
            alive &= ~term
            state["failed"] = ~alive
            if not alive.any():
                break
        return task.success(state) & alive
    return fn


def zero_policy(obs, state=None):
    return np.zeros((obs.shape[0], 2))


@dataclass
class CurriculumRun:
    agent: PPO
    roa: RoAPolygon
    measured: RoAPolygon
    history: list = field(default_factory=list)     # (iteration, theta_i, omega_i, success_rate_i)
    metrics: list = field(default_factory=list)


@dataclass
class TrainCurriculumConfig:
    mode: str = "adaptive"          # or "uniform"
    residual: bool = True
    iterations: int = 20
    uniform_max: float = None       # uniform mode samples [0, uniform_max]; defaults to measure_max
    measure_trials: int = 20
    probes_per_iteration: int = 40
    measure_max: float = 64.0
    measure_resolution: float = 0.25
    policy_updates: bool = True
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    task: BalanceTaskConfig = field(default_factory=BalanceTaskConfig)
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(batch_steps=2000, n_envs=20))

    def __post_init__(self):
        if self.mode not in ("adaptive", "uniform"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")


def train_adaptive(cfg: TrainCurriculumConfig, seed=0, params: BalancerParams = None):
    """Residual (or pure) policy training under adaptive or uniform push sampling."""
    cur = cfg.curriculum
    state = {"roa": RoAPolygon.uniform(cur.M, cur.initial_magnitude)}

    def sampler(n, rng):
        if cfg.mode == "adaptive":
            return sample_perturbation(state["roa"], cur, rng, n)
        top = cfg.measure_max if cfg.uniform_max is None else cfg.uniform_max
        return rng.uniform(0.0, TWO_PI, n), rng.uniform(0.0, top, n)

    task = BalanceTask(params, cfg.task, residual=cfg.residual, sampler=sampler)
    history, metrics = [], []

    probe_rng = stream(seed, "curriculum", "probe")
    probe = balance_success_fn(task, lambda obs, s: policy["fn"](obs, s))
    policy = {"fn": zero_policy}

    def on_iteration(it, batch, agent):
        # boundary statistics come from deterministic probes at curriculum pushes
        roa = state["roa"]
        theta, mag = sampler(cfg.probes_per_iteration, probe_rng)
        ok = probe(theta, mag, probe_rng)
        roa.record(theta, ok)
        n = roa.n_good + roa.n_bad
        rate = np.where(n > 0, roa.n_good / np.maximum(n, 1), np.nan)
        for i in range(roa.M):
            history.append((it, float(roa.angles[i]), float(roa.magnitudes[i]), float(rate[i])))
        area = roa_area(roa)
        if (it + 1) % cur.update_period == 0:
            if cfg.mode == "adaptive":
                state["roa"] = update_roa(roa, cur)
            else:
                roa.n_good[:] = 0
                roa.n_bad[:] = 0
        return {"roa_estimate_area": area, "probe_success": float(np.mean(ok))}

    if cfg.policy_updates:
        def hook(it, batch, agent):
            policy["fn"] = lambda obs, s: agent.policy.mean(obs)
            return on_iteration(it, batch, agent)
        agent, log = ppo_train(task, cfg.iterations, cfg.ppo, seed=seed, on_iteration=hook)
        metrics = log.rows
        policy_fn = policy["fn"]
    else:
        agent = None
        policy_fn = zero_policy
        for it in range(cfg.iterations):
            row = {"iteration": it}
            row.update(on_iteration(it, None, None))
            metrics.append(row)
    measured = measure_roa(balance_success_fn(task, policy_fn), cur.M, cfg.measure_trials,
                           stream(seed, "curriculum", "measure"), cfg.measure_max, cfg.measure_resolution,
                           cur.success_threshold)
    return CurriculumRun(agent, state["roa"], measured, history, metrics)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "theta", "omega", "success_rate"])
        for it, th, om, sr in history:
            w.writerow([it, repr(th), repr(om), repr(sr)])


def roa_svg(polygons, labels=None, size=400):
    """Standalone SVG overlay of RoA polygons."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    rmax = max([float(np.max(p.magnitudes)) for p in polygons] + [1e-9])
    c = size / 2
    scale = 0.45 * size / rmax
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<line x1="0" y1="{c}" x2="{size}" y2="{c}" stroke="#ccc"/>',
             f'<line x1="{c}" y1="0" x2="{c}" y2="{size}" stroke="#ccc"/>']
    for k, p in enumerate(polygons):
        pts = " ".join(f"{c + scale * m * np.cos(a):.2f},{c - scale * m * np.sin(a):.2f}"
                       for a, m in zip(p.angles, p.magnitudes))
        col = colors[k % len(colors)]
        parts.append(f'<polygon points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>')
        if labels:
            parts.append(f'<text x="10" y="{20 + 16 * k}" fill="{col}">{labels[k]}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
