"""Exhaustive depth-limited contact planner with min-composed rewards.

The search is generic over a *planning model* exposing

    n_actions                       number of discrete actions per state
    expand(states) -> Expansion     all actions from a batch of states
    leaf_value(states) -> values    value of a state once the depth runs out

so the same code serves the continuous fall model and the small tabular
instances used to check it against value iteration.  The recursion is

    V_0(s) = leaf(s)
    V_d(s) = max_a min(r(s, a), V_{d-1}(s'))      (terminal outcomes: r)

with ties broken toward the lowest action index.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .envs import fall as F
from .envs.fall import (AbstractFallState, FallAction, FallModelParams, fall_reward,
                        fall_unplanned, starts_halted)

TORSO = -1


class GridError(ValueError):
    """Initial state outside the planner grid, or an invalid grid."""


@dataclass
class Expansion:
    """Outcomes of every action from every expanded state, arrays of shape (n_states, n_actions)."""
    reward: np.ndarray
    terminal: np.ndarray
    next_states: np.ndarray   # (n_states, n_actions, state_dim)
    impulse: np.ndarray = None
    kind: np.ndarray = None   # 0 contact, 1 torso, 2 halted without contact


def search(model, roots, depth):
    """Depth-limited search from a batch of root states.

    Returns ``(values, levels, q_levels)``: root values, the expanded levels
    ``(states, Expansion)`` and the per-level action values.  Live children of
    a level are stored in row-major order of their (row, action) outcome.
    """
    if depth < 1:
        raise GridError("depth must be >= 1")
    levels = []
    states = np.atleast_2d(np.asarray(roots, dtype=np.float64))
    for d in range(depth):
        exp = _expand_unique(model, states)
        levels.append((states, exp))
        if d == depth - 1:
            break
        states = exp.next_states[~exp.terminal]
        if states.shape[0] == 0:
            break
    child_value = None
    q_levels = []
    for d in range(len(levels) - 1, -1, -1):
        states, exp = levels[d]
        n, A = exp.reward.shape
        cont = np.ones((n, A))
        if child_value is not None:
            cont[~exp.terminal] = child_value
        elif d == depth - 1:
            live = ~exp.terminal
            if live.any():
                cont[live] = model.leaf_value(exp.next_states[live])
        q = np.where(exp.terminal, exp.reward, np.minimum(exp.reward, cont))
        q_levels.append(q)
        child_value = q.max(axis=1)
    q_levels.reverse()
    return child_value, levels, q_levels


def _expand_unique(model, states):
    """Expand each distinct state once; models may declare columns the expansion ignores."""
    key = states[:, getattr(model, "key_columns", slice(None))]
    uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    if len(uniq) == len(states):
        return model.expand(states)
    exp = model.expand(states[first])
    inv = inv.ravel()
    take = lambda a: None if a is None else a[inv]
    return Expansion(exp.reward[inv], exp.terminal[inv], exp.next_states[inv],
                     take(exp.impulse), take(exp.kind))


def greedy_path(levels, q_levels, root=0):
    """``(row, action)`` chosen at each level along the optimal branch of one root."""
    path = []
    row = root
    for d, ((states, exp), q) in enumerate(zip(levels, q_levels)):
        a = int(np.argmax(q[row]))
        path.append((row, a))
        if exp.terminal[row, a] or d + 1 == len(levels):
            break
        # position of (row, a) among the live outcomes of this level
        live = ~exp.terminal
        row = int(np.count_nonzero(live[:row])) + int(np.count_nonzero(live[row, :a]))
    return path


def value_iteration_tabular(reward, next_state, terminal, leaf, depth):
    """Reference min-composition value iteration on a finite MDP (arrays indexed [s, a])."""
    V = np.asarray(leaf, dtype=np.float64).copy()
    for _ in range(depth):
        cont = V[next_state]
        q = np.where(terminal, reward, np.minimum(reward, cont))
        V = q.max(axis=1)
    return V


class TabularModel:
    """Finite deterministic MDP; states are encoded as 1-vectors holding the index."""

    def __init__(self, reward, next_state, terminal, leaf):
        self.reward = np.asarray(reward, dtype=np.float64)
        self.next_state = np.asarray(next_state, dtype=np.int64)
        self.terminal = np.asarray(terminal, dtype=bool)
        self.leaf = np.asarray(leaf, dtype=np.float64)
        self.n_actions = self.reward.shape[1]

    def expand(self, states):
        idx = states[:, 0].astype(np.int64)
        nxt = self.next_state[idx].astype(np.float64)[..., None]
        return Expansion(self.reward[idx], self.terminal[idx], nxt)

    def leaf_value(self, states):
        return self.leaf[states[:, 0].astype(np.int64)]


def _linspace(lo, hi, n):
    return np.linspace(lo, hi, n) if n > 1 else np.array([0.5 * (lo + hi)])


@dataclass(frozen=True)
class GridSpec:
    """Discretization of the fall planner.

    State bins only bound the region the planner accepts (the search itself
    is over actions); action bins are evenly spaced including both bounds.
    """
    state_bins: tuple = (2, 2, 2, 2)          # r1, theta1, rdot1, thetadot1
    state_bounds: tuple = ((0.03, 0.25), (-1.6, 1.6), (-1.0, 1.0), (-30.0, 30.0))
    theta2_bins: int = 5
    delta_bins: int = 4
    rdot_bins: int = 3
    depth: int = 2

    def __post_init__(self):
        bins = (*self.state_bins, self.theta2_bins, self.delta_bins, self.rdot_bins)
        if any(int(b) < 2 for b in bins):
            raise GridError(f"every bin count must be >= 2, got {bins}")
        if self.depth < 1:
            raise GridError("depth must be >= 1")

    def refined(self):
        """Nested refinement: every bin count n becomes 2n - 1 (old nodes kept)."""
        return GridSpec(tuple(2 * b - 1 for b in self.state_bins), self.state_bounds,
                        2 * self.theta2_bins - 1, 2 * self.delta_bins - 1,
                        2 * self.rdot_bins - 1, self.depth)

    def contains(self, s: AbstractFallState):
        vals = s.dynamic
        return all(lo <= v <= hi for v, (lo, hi) in zip(vals, self.state_bounds))

    def to_dict(self):
        return {"state_bins": list(self.state_bins), "state_bounds": [list(b) for b in self.state_bounds],
                "theta2_bins": self.theta2_bins, "delta_bins": self.delta_bins,
                "rdot_bins": self.rdot_bins, "depth": self.depth}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "state_bins" in d:
            d["state_bins"] = tuple(d["state_bins"])
        if "state_bounds" in d:
            d["state_bounds"] = tuple(tuple(b) for b in d["state_bounds"])
        return cls(**d)


class FallPlannerModel:
    """Planning model for the abstract fall: actions are (part, theta2, delta, rdot_d) bins.

    Action index order is lexicographic in (part, theta2 bin, delta bin,
    rdot bin).  States are rows ``(c1, r1, theta1, rdot1, thetadot1)``.
    """

    def __init__(self, params: FallModelParams, grid: GridSpec):
        self.p = params
        self.grid = grid
        self.theta2 = _linspace(*params.theta2_bounds, grid.theta2_bins)
        self.rdot = _linspace(*params.rdot_bounds, grid.rdot_bins)
        parts, th2, dl, reach = [], [], [], []
        for k, bp in enumerate(params.parts):
            deltas = _linspace(bp.delta_min, bp.delta_max, grid.delta_bins)
            for t in self.theta2:
                for d in deltas:
                    parts.append(k)
                    th2.append(t)
                    dl.append(d)
                    reach.append(bp.reach)
        # candidate geometry, one column per (part, theta2, delta)
        self.c_part = np.array(parts)
        self.c_theta2 = np.array(th2)
        self.c_delta = np.array(dl)
        self.c_reach = np.array(reach)
        self.n_geom = len(parts)
        self.n_actions = self.n_geom * len(self.rdot)
        # the current contact index does not change the outcome of any action
        self.key_columns = slice(1, 5)

    def action(self, index):
        g, k = divmod(int(index), len(self.rdot))
        return int(self.c_part[g]), FallAction(float(self.c_theta2[g]), float(self.c_delta[g]),
                                               float(self.rdot[k]))

    def leaf_value(self, states):
        j, halted = fall_unplanned(self.p, states[:, 1:5])
        return np.where(halted, 1.0, fall_reward(j))

    def _first_crossings(self, hist, end, kind, chunk=64):
        """First step index at which each candidate's contact gap is >= 0 (-1: never)."""
        B = hist.shape[2]
        G = self.n_geom
        first = np.full((B, G), -1)
        open_ = np.ones((B, G), dtype=bool)
        open_[(kind == 2) & (end == 0)] = False     # halted at the start
        cth, sth = np.cos(self.c_theta2), np.sin(self.c_theta2)
        for t0 in range(0, hist.shape[0], chunk):
            rows = np.flatnonzero((end >= t0) & open_.any(axis=1))
            if rows.size == 0:
                break
            t1 = min(t0 + chunk, hist.shape[0])
            seg = hist[t0:t1, :, rows]                     # (t, 4, nb)
            x = (seg[:, 0] * np.sin(seg[:, 1]))[..., None]
            yy = (seg[:, 0] * np.cos(seg[:, 1]))[..., None]
            dx = x - self.c_delta
            g = np.minimum(dx * cth - yy * sth, self.c_reach - np.hypot(dx, yy))
            steps = np.arange(t0, t1)[:, None]
            hit = (g >= 0.0) & (steps <= end[rows])[..., None] & open_[rows][None]
            anyhit = hit.any(axis=0)
            rb, cg = np.nonzero(anyhit)
            first[rows[rb], cg] = t0 + hit[:, rb, cg].argmax(axis=0)
            open_[rows[rb], cg] = False
        return first

    max_trajectories = 1500    # bounds the stored integration history

    def expand(self, states):
        states = np.asarray(states, dtype=np.float64)
        per = max(1, self.max_trajectories // len(self.rdot))
        if states.shape[0] <= per:
            return self._expand(states)
        parts = [self._expand(states[i:i + per]) for i in range(0, states.shape[0], per)]
        cat = lambda name: np.concatenate([getattr(e, name) for e in parts], axis=0)
        return Expansion(cat("reward"), cat("terminal"), cat("next_states"), cat("impulse"), cat("kind"))

    def _expand(self, states):
        p = self.p
        n = states.shape[0]
        nr = len(self.rdot)
        G = self.n_geom
        # one trajectory per (state, rdot bin)
        y0 = np.repeat(states[:, 1:5], nr, axis=0).T
        rd = np.tile(self.rdot, n)
        hist, end, kind = F.integrate_batch(p, y0, rd)
        B = y0.shape[1]
        out_kind = np.full((B, G), 2, dtype=np.int8)
        out_state = np.zeros((B, G, 5))
        out_j = np.zeros((B, G))
        # torso time within the final step, for ties with contacts in the same step
        tt = np.full(B, np.inf)
        tor = (kind == 1) & (end > 0)
        if tor.any():
            tau, y_t = F.substep_batch(p, hist[end[tor] - 1, :, np.nonzero(tor)[0]].T, rd[tor],
                                       lambda y: p.torso_height - y[0] * np.cos(y[1]))
            tt[tor] = tau
            tj = F.torso_impulse(p, *y_t)
        else:
            y_t, tj = None, None
        tor_idx = {b: i for i, b in enumerate(np.nonzero(tor)[0])}
        first = self._first_crossings(hist, end, kind)
        # refine crossings at k > 0 by bisection inside the step
        bb, gg = np.nonzero(first > 0)
        tau_c = np.zeros((B, G))
        y_c = np.zeros((B, G, 4))
        if bb.size:
            k = first[bb, gg]
            yprev = hist[k - 1, :, bb].T
            th2, dl, rc = self.c_theta2[gg], self.c_delta[gg], self.c_reach[gg]
            tau, ye = F.substep_batch(p, yprev, rd[bb], lambda y: F.contact_gap(y[0], y[1], th2, dl, rc))
            tau_c[bb, gg] = tau
            y_c[bb, gg] = ye.T
        b0, g0 = np.nonzero(first == 0)
        if b0.size:
            y_c[b0, g0] = hist[0, :, b0]
        valid = first >= 0
        # a torso impact in the same step as the contact wins if it comes first
        same = valid & (kind[:, None] == 1) & (first == end[:, None]) & (first > 0)
        valid &= ~(same & (tt[:, None] < tau_c))
        # torso ends before contact at step 0 are already excluded by integrate_batch ordering
        vb, vg = np.nonzero(valid)
        if vb.size:
            yc = y_c[vb, vg].T
            j, r2, t2, rd2, td2 = F.post_impact(p, *yc, self.c_delta[vg])
            out_kind[vb, vg] = 0
            out_j[vb, vg] = j
            out_state[vb, vg] = np.stack([self.c_part[vg].astype(float),
                                          np.clip(r2, p.r_min, p.r_max), t2, rd2, td2], axis=1)
        # no contact: torso impact or halt
        nb, ng = np.nonzero(~valid)
        if nb.size:
            is_t = kind[nb] == 1
            tb, tg = nb[is_t], ng[is_t]
            if tb.size:
                rows = np.array([tor_idx.get(b, -1) for b in tb])
                ok = rows >= 0
                jt = np.zeros(tb.size)
                jt[ok] = tj[rows[ok]]
                # torso already at the start
                y_start = hist[0, :, tb[~ok]]
                if (~ok).any():
                    jt[~ok] = F.torso_impulse(p, *y_start.T)
                out_kind[tb, tg] = 1
                out_j[tb, tg] = jt
        # reshape (n * nr, G) -> (n, G * nr) in (geom, rdot) order
        def arrange(a):
            a = a.reshape(n, nr, G, *a.shape[2:])
            return np.swapaxes(a, 1, 2).reshape(n, G * nr, *a.shape[3:])
        kind_a = arrange(out_kind)
        j_a = arrange(out_j)
        st_a = arrange(out_state)
        reward = np.where(kind_a == 2, 1.0, fall_reward(j_a))
        terminal = kind_a != 0
        return Expansion(reward, terminal, st_a, impulse=j_a, kind=kind_a)


@dataclass
class PlanStep:
    part: int
    action: FallAction
    impulse: float
    kind: str     # "contact", "torso" or "halt"


@dataclass
class PlanResult:
    steps: list = field(default_factory=list)
    value: float = 1.0
    wall_time_s: float = 0.0

    @property
    def contacts(self):
        return [(s.part, s.action) for s in self.steps if s.action is not None]

    @property
    def impulses(self):
        return [s.impulse for s in self.steps if s.kind != "halt"]

    @property
    def rewards(self):
        return [fall_reward(j) for j in self.impulses]


def dp_plan(grid: GridSpec, s0: AbstractFallState, params: FallModelParams = None, model=None):
    """Best discretized contact sequence of length up to ``grid.depth`` from ``s0``.

    The returned steps include the uncontrolled remainder of the fall (a
    torso impact, ``part == TORSO``) when the plan does not end in a halt.
    """
    return dp_plan_batch(grid, [s0], params, model)[0]


def dp_plan_batch(grid: GridSpec, states, params: FallModelParams = None, model=None):
    """Plan from several states in one level-synchronous search (same results as one by one)."""
    params = FallModelParams() if params is None else params
    t0 = time.perf_counter()
    for s in states:
        s.validate(params)
        if not grid.contains(s):
            raise GridError(f"state {s} outside planner grid bounds")
    results = [None] * len(states)
    todo = [i for i, s in enumerate(states) if not starts_halted(s.thetadot1, s.theta1)]
    for i in range(len(states)):
        if i not in todo:
            results[i] = PlanResult([], 1.0)
    if todo:
        model = FallPlannerModel(params, grid) if model is None else model
        roots = np.array([states[i].as_array() for i in todo])
        values, levels, q_levels = search(model, roots, grid.depth)
        for k, i in enumerate(todo):
            steps = _extract_steps(params, model, levels, q_levels, k)
            results[i] = PlanResult(steps, float(values[k]))
    elapsed = (time.perf_counter() - t0) / max(len(states), 1)
    for r in results:
        r.wall_time_s = elapsed
    return results


def _extract_steps(params, model, levels, q_levels, root):
    steps = []
    path = greedy_path(levels, q_levels, root)
    for d, (row, a) in enumerate(path):
        _, exp = levels[d]
        part, act = model.action(a)
        k = exp.kind[row, a]
        if k == 0:
            steps.append(PlanStep(part, act, float(exp.impulse[row, a]), "contact"))
        elif k == 1:
            steps.append(PlanStep(TORSO, act, float(exp.impulse[row, a]), "torso"))
        else:
            steps.append(PlanStep(part, act, 0.0, "halt"))
        if k == 0 and d == len(path) - 1:
            j, halted = fall_unplanned(params, exp.next_states[row, a][1:5])
            steps.append(PlanStep(TORSO, None, 0.0 if halted else j, "halt" if halted else "torso"))
    return steps


def dp_controller(grid: GridSpec, params: FallModelParams = None, timings=None):
    """Receding-horizon controller for :func:`run_fall_episode`: re-plan at every contact."""
    params = FallModelParams() if params is None else params
    model = FallPlannerModel(params, grid)

    def control(s):
        res = dp_plan(grid, s, params, model)
        if timings is not None:
            timings.append(res.wall_time_s)
        if not res.contacts:
            return 0, FallAction(0.0, params.parts[0].delta_min, 0.0)
        return res.contacts[0]
    return control


def replay_plan(params: FallModelParams, s0: AbstractFallState, plan: PlanResult):
    """Execute a plan open-loop through the continuous simulator; returns the min reward."""
    s = s0
    rewards = []
    for part, act in plan.contacts:
        if starts_halted(s.thetadot1, s.theta1):
            return min(rewards, default=1.0)
        out = F.fall_simulate_to_next_contact(params, s, part, act)
        if out.halted:
            return min(rewards, default=1.0)
        rewards.append(out.reward)
        if out.torso:
            return min(rewards)
        s = out.state
    j, halted = fall_unplanned(params, s)
    if not halted:
        rewards.append(fall_reward(j))
    return min(rewards, default=1.0)


@dataclass
class ReplayTuple:
    s: AbstractFallState
    a: FallAction
    s_next: AbstractFallState
    r: float
    c: int
    terminal: bool = False


def dp_rollouts(grid: GridSpec, starts, params: FallModelParams = None, max_contacts=6, model=None):
    """Receding-horizon planner rollouts from many states, advanced in lockstep.

    Returns ``(tuples_per_rollout, min_rewards)``.  A rollout that is still
    falling after ``max_contacts`` (or leaves the grid) finishes unplanned,
    as in :func:`run_fall_episode`.
    """
    params = FallModelParams() if params is None else params
    model = FallPlannerModel(params, grid) if model is None else model
    n = len(starts)
    per_rollout = [[] for _ in range(n)]
    tail = list(starts)
    active = [(i, s) for i, s in enumerate(starts)]
    for _ in range(max_contacts):
        active = [(i, s) for i, s in active if not starts_halted(s.thetadot1, s.theta1)]
        for i, s in active:
            tail[i] = s
        plannable = [(i, s) for i, s in active if grid.contains(s)]
        if not plannable:
            break
        plans = dp_plan_batch(grid, [s for _, s in plannable], params, model)
        nxt = []
        for (i, s), plan in zip(plannable, plans):
            tail[i] = None
            if not plan.contacts:
                continue
            part, act = plan.contacts[0]
            o = F.fall_simulate_to_next_contact(params, s, part, act)
            if o.halted:
                per_rollout[i].append(ReplayTuple(s, act, s, 1.0, part, True))
                continue
            per_rollout[i].append(ReplayTuple(s, act, o.state, o.reward, part, o.torso))
            if not o.torso:
                nxt.append((i, o.state))
                tail[i] = o.state
        active = nxt
    mins = np.ones(n)
    for i in range(n):
        rs = [t.r for t in per_rollout[i]]
        if tail[i] is not None:
            j, halted = fall_unplanned(params, tail[i])
            if not halted:
                rs.append(fall_reward(j))
        mins[i] = min(rs, default=1.0)
    return per_rollout, mins


def seed_buffer(grid: GridSpec, n, init_dist, rng, params: FallModelParams = None, max_contacts=6):
    """Tuples ``(s, a, s', r, c)`` from receding-horizon planner rollouts of ``n`` initial states."""
    params = FallModelParams() if params is None else params
    starts = [init_dist.sample(params, rng, falling_only=True) for _ in range(n)]
    per_rollout, _ = dp_rollouts(grid, starts, params, max_contacts)
    return [t for ts in per_rollout for t in ts]
