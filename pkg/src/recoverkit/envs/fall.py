"""Planar abstract fall model: an inverted pendulum with a telescoping stopper.

Frame conventions: the current contact (pivot) is the origin, x points in the
fall direction and y up.  ``theta1`` is measured from vertical, positive in
the fall direction, so the COM sits at ``r1 * (sin theta1, cos theta1)``.
Vertical velocities are negative downward; an impact needs ``ydot2 <= 0``.

The next contact is a ground point ``delta`` ahead of the pivot.  Contact is
made once the COM lies on the ray leaving that point at angle ``theta2`` and
the point is within the limb's reach.  The event function is

    h(t) = min((x - delta) cos theta2 - y sin theta2,  reach - |COM - (delta, 0)|)

and contact happens when ``h`` first becomes non-negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class EnvironmentFault(RuntimeError):
    """Integration diverged or produced a non-finite state."""


@dataclass(frozen=True)
class BodyPart:
    name: str
    delta_min: float
    delta_max: float
    reach: float


DEFAULT_PARTS = (
    BodyPart("toe", 0.00, 0.08, 0.140),
    BodyPart("heel", 0.02, 0.10, 0.125),
    BodyPart("knee", 0.04, 0.12, 0.095),
    BodyPart("hand", 0.08, 0.24, 0.150),
)

_HEIGHT = 0.346
_MASS = 1.6


@dataclass(frozen=True)
class FallModelParams:
    mass: float = _MASS
    inertia: float = _MASS * (_HEIGHT / 2) ** 2 / 3.0
    gravity: float = 9.81
    parts: tuple = DEFAULT_PARTS
    theta2_bounds: tuple = (-0.6, 0.8)
    rdot_bounds: tuple = (-0.3, 0.0)
    servo_gain: float = 20.0
    r_min: float = 0.03
    r_max: float = 0.25
    torso_height: float = 0.03
    dt: float = 0.001
    t_max: float = 3.0
    rate_cap: float = 60.0

    def __post_init__(self):
        if not (self.mass > 0 and self.inertia > 0 and self.gravity > 0):
            raise ValueError("mass, inertia and gravity must be positive")
        if len(self.parts) == 0:
            raise ValueError("at least one contacting body part is required")
        object.__setattr__(self, "parts", tuple(
            p if isinstance(p, BodyPart) else BodyPart(**p) for p in self.parts))

    @property
    def n_parts(self):
        return len(self.parts)

    def with_parts(self, n):
        return replace(self, parts=self.parts[:n])


@dataclass(frozen=True)
class AbstractFallState:
    c1: int
    r1: float
    theta1: float
    rdot1: float
    thetadot1: float

    def as_array(self):
        return np.array([self.c1, self.r1, self.theta1, self.rdot1, self.thetadot1], dtype=np.float64)

    @property
    def dynamic(self):
        return (self.r1, self.theta1, self.rdot1, self.thetadot1)

    def validate(self, params: FallModelParams):
        if not 0 <= self.c1 < params.n_parts:
            raise ValueError(f"c1={self.c1} outside [0, {params.n_parts})")
        if not params.r_min <= self.r1 <= params.r_max:
            raise ValueError(f"r1={self.r1} outside [{params.r_min}, {params.r_max}]")
        if not all(math.isfinite(v) for v in self.dynamic):
            raise EnvironmentFault("non-finite fall state")


@dataclass(frozen=True)
class FallAction:
    theta2: float
    delta: float
    rdot_d: float

    def as_array(self):
        return np.array([self.theta2, self.delta, self.rdot_d], dtype=np.float64)

    def clamp(self, params: FallModelParams, part: int):
        p = params.parts[part]
        return FallAction(
            float(np.clip(self.theta2, *params.theta2_bounds)),
            float(np.clip(self.delta, p.delta_min, p.delta_max)),
            float(np.clip(self.rdot_d, *params.rdot_bounds)),
        )


@dataclass(frozen=True)
class ContactOutcome:
    """Result of one fall phase.

    ``torso`` marks an uncontrolled impact of the body itself (the phase's
    planned contact never happened); ``halted`` means the fall stopped with no
    impact.  Either way the fall is over.
    """
    state: AbstractFallState
    impulse: float
    halted: bool
    torso: bool = False
    time: float = 0.0

    @property
    def terminal(self):
        return self.halted or self.torso

    @property
    def reward(self):
        return fall_reward(self.impulse)


def impulse(M, I, x1, y1, x2, y2, ydot2):
    """Vertical plastic-impact impulse at point (x2, y2) of a body with COM (x1, y1)."""
    if not (M > 0 and I > 0):
        raise ValueError("mass and inertia must be positive")
    if ydot2 > 0:
        raise ValueError(f"no impact: contact point moving upward (ydot2={ydot2})")
    return -ydot2 / (1.0 / M + (x2 - x1) ** 2 / I)


def fall_reward(j):
    return 1.0 / (1.0 + j)


def _accel(p, r, th, rd, thd, rdot_d, sin=math.sin):
    M = p.mass
    rdd = p.servo_gain * (rdot_d - rd)
    thdd = (M * p.gravity * r * sin(th) - 2.0 * M * r * rd * thd) / (p.inertia + M * r * r)
    return rdd, thdd


def _rk4(p, y, rdot_d, h):
    r, th, rd, thd = y
    a1, b1 = _accel(p, r, th, rd, thd, rdot_d)
    r2, th2, rd2, thd2 = r + 0.5 * h * rd, th + 0.5 * h * thd, rd + 0.5 * h * a1, thd + 0.5 * h * b1
    a2, b2 = _accel(p, r2, th2, rd2, thd2, rdot_d)
    r3, th3, rd3, thd3 = r + 0.5 * h * rd2, th + 0.5 * h * thd2, rd + 0.5 * h * a2, thd + 0.5 * h * b2
    a3, b3 = _accel(p, r3, th3, rd3, thd3, rdot_d)
    r4, th4, rd4, thd4 = r + h * rd3, th + h * thd3, rd + h * a3, thd + h * b3
    a4, b4 = _accel(p, r4, th4, rd4, thd4, rdot_d)
    r_n = r + h / 6.0 * (rd + 2 * rd2 + 2 * rd3 + rd4)
    th_n = th + h / 6.0 * (thd + 2 * thd2 + 2 * thd3 + thd4)
    rd_n = rd + h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
    thd_n = thd + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
    # telescoping joint limits
    if r_n < p.r_min:
        r_n, rd_n = p.r_min, max(rd_n, 0.0)
    elif r_n > p.r_max:
        r_n, rd_n = p.r_max, min(rd_n, 0.0)
    return (r_n, th_n, rd_n, thd_n)


def _rk4_batch(p, y, rdot_d, h):
    """Vectorized RK4 step; ``y`` has shape (4, n), ``h`` scalar or (n,)."""
    r, th, rd, thd = y
    a1, b1 = _accel(p, r, th, rd, thd, rdot_d, np.sin)
    hh = 0.5 * h
    a2, b2 = _accel(p, r + hh * rd, th + hh * thd, rd + hh * a1, thd + hh * b1, rdot_d, np.sin)
    rd2, thd2 = rd + hh * a1, thd + hh * b1
    a3, b3 = _accel(p, r + hh * rd2, th + hh * thd2, rd + hh * a2, thd + hh * b2, rdot_d, np.sin)
    rd3, thd3 = rd + hh * a2, thd + hh * b2
    a4, b4 = _accel(p, r + h * rd3, th + h * thd3, rd + h * a3, thd + h * b3, rdot_d, np.sin)
    rd4, thd4 = rd + h * a3, thd + h * b3
    r_n = r + h / 6.0 * (rd + 2 * rd2 + 2 * rd3 + rd4)
    th_n = th + h / 6.0 * (thd + 2 * thd2 + 2 * thd3 + thd4)
    rd_n = rd + h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
    thd_n = thd + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
    lo = r_n < p.r_min
    hi = r_n > p.r_max
    r_n = np.clip(r_n, p.r_min, p.r_max)
    rd_n = np.where(lo, np.maximum(rd_n, 0.0), np.where(hi, np.minimum(rd_n, 0.0), rd_n))
    return np.stack([r_n, th_n, rd_n, thd_n])


def mechanical_energy(p: FallModelParams, r, th, rd, thd):
    """Kinetic plus potential energy of the pendulum about its pivot."""
    return 0.5 * p.mass * rd ** 2 + 0.5 * (p.inertia + p.mass * r ** 2) * thd ** 2 \
        + p.mass * p.gravity * r * np.cos(th)


def contact_gap(r, th, theta2, delta, reach):
    x = r * np.sin(th)
    y = r * np.cos(th)
    g = (x - delta) * np.cos(theta2) - y * np.sin(theta2)
    return np.minimum(g, reach - np.hypot(x - delta, y))


def starts_halted(thd, th):
    """Loop guard of the fall phase: falling requires a forward tendency."""
    return (thd < 0) | ((thd == 0) & (th <= 0))


def post_impact(p: FallModelParams, r, th, rd, thd, delta):
    """Impulse and the pendulum rates about the new pivot (vectorizable).

    The impulse is the vertical plastic-impact value of :func:`impulse`; the
    pivot transfer conserves angular momentum about the new contact point and
    keeps the COM velocity component along the new (telescoping) leg.
    Returns ``(j, r2, theta2, rdot2, thetadot2)``.  An upward-moving contact
    point yields ``j = 0`` (touch without impact).
    """
    s, c = np.sin(th), np.cos(th)
    x1, y1 = r * s, r * c
    vx = rd * s + r * thd * c
    vy = rd * c - r * thd * s
    ydot2 = np.minimum(rd * c - thd * delta, 0.0)
    j = -ydot2 / (1.0 / p.mass + (delta - x1) ** 2 / p.inertia)
    rx, ry = x1 - delta, y1
    r2 = np.hypot(rx, ry)
    th2 = np.arctan2(rx, ry)
    # clockwise (fall-direction) angular momentum about the new pivot
    h = p.mass * (ry * vx - rx * vy) + p.inertia * thd
    thd2 = h / (p.inertia + p.mass * r2 * r2)
    rdot2 = (vx * rx + vy * ry) / r2
    return j, r2, th2, rdot2, thd2


def torso_impulse(p: FallModelParams, r, th, rd, thd):
    ydot = rd * np.cos(th) - r * thd * np.sin(th)
    return -p.mass * np.minimum(ydot, 0.0)


def fall_unplanned(p: FallModelParams, s: AbstractFallState | np.ndarray):
    """Closed-form outcome of falling with the telescoping joint locked and no planned contact.

    Accepts a state or a (..., 4) array of ``(r, theta, rdot, thetadot)``.
    Returns ``(j, halted)``; when halted, ``j`` is 0.
    """
    if isinstance(s, AbstractFallState):
        arr = np.array(s.dynamic)
    else:
        arr = np.asarray(s, dtype=np.float64)
    r, th, _, thd = arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3]
    M, I, g = p.mass, p.inertia, p.gravity
    J = I + M * r * r
    energy = 0.5 * J * thd ** 2 + M * g * r * np.cos(th)
    halted = starts_halted(thd, th) | ((th < 0) & (energy <= M * g * r))
    cos_t = np.clip(p.torso_height / r, -1.0, 1.0)
    already = r * np.cos(th) <= p.torso_height
    th_t = np.where(already, th, np.arccos(cos_t))
    w2 = np.where(already, thd ** 2, 2.0 * (energy - M * g * r * np.cos(th_t)) / J)
    w = np.sqrt(np.maximum(w2, 0.0))
    j = M * r * w * np.abs(np.sin(th_t))
    j = np.where(halted, 0.0, j)
    if np.ndim(j) == 0:
        return float(j), bool(halted)
    return j, halted


BISECT_ITERS = 32   # 1 ms / 2**32: far below the 1e-8 m contact tolerance


def _bisect_event(p, y0, rdot_d, fn, dt):
    """Sub-step time in (0, dt] at which ``fn`` of the RK4-propagated state reaches zero."""
    lo, hi = 0.0, dt
    y_hi = _rk4(p, y0, rdot_d, hi)
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        y_mid = _rk4(p, y0, rdot_d, mid)
        if fn(y_mid) >= 0.0:
            hi, y_hi = mid, y_mid
        else:
            lo = mid
    return hi, y_hi


def fall_simulate_to_next_contact(p: FallModelParams, s: AbstractFallState, part: int,
                                  a: FallAction) -> ContactOutcome:
    """Integrate one fall phase until the planned contact, a torso impact, or a halt."""
    s.validate(p)
    a = a.clamp(p, part)
    bp = p.parts[part]
    y = s.dynamic
    if starts_halted(y[3], y[1]):
        return ContactOutcome(s, 0.0, True)

    def gap(y):
        return float(contact_gap(y[0], y[1], a.theta2, a.delta, bp.reach))

    def height(y):
        return p.torso_height - y[0] * math.cos(y[1])

    t = 0.0
    n_steps = int(round(p.t_max / p.dt))
    if gap(y) >= 0.0:
        return _make_contact(p, s.c1, y, part, a.delta, t)
    if height(y) >= 0.0:
        return ContactOutcome(s, float(torso_impulse(p, *y)), False, torso=True)
    for _ in range(n_steps):
        y_new = _rk4(p, y, a.rdot_d, p.dt)
        if not all(math.isfinite(v) for v in y_new) or abs(y_new[3]) > p.rate_cap:
            raise EnvironmentFault(f"fall integration diverged at t={t:.4f}")
        hit_contact = gap(y_new) >= 0.0
        hit_torso = height(y_new) >= 0.0
        if hit_contact or hit_torso:
            tc, yc = _bisect_event(p, y, a.rdot_d, gap, p.dt) if hit_contact else (np.inf, None)
            tt, yt = _bisect_event(p, y, a.rdot_d, height, p.dt) if hit_torso else (np.inf, None)
            if tc <= tt:
                return _make_contact(p, s.c1, yc, part, a.delta, t + tc)
            st = AbstractFallState(s.c1, *yt)
            return ContactOutcome(st, float(torso_impulse(p, *yt)), False, torso=True, time=t + tt)
        t += p.dt
        y = y_new
        if y[3] < 0.0:
            return ContactOutcome(AbstractFallState(s.c1, *y), 0.0, True, time=t)
    return ContactOutcome(AbstractFallState(s.c1, *y), 0.0, True, time=t)


def _make_contact(p, c_old, y, part, delta, t):
    j, r2, th2, rd2, thd2 = post_impact(p, *y, delta)
    r2 = min(max(float(r2), p.r_min), p.r_max)
    st = AbstractFallState(part, r2, float(th2), float(rd2), float(thd2))
    return ContactOutcome(st, float(j), False, time=t)


def integrate_batch(p: FallModelParams, y0: np.ndarray, rdot_d: np.ndarray):
    """Integrate many fall phases at once with no planned contact.

    ``y0`` is (4, n).  Returns ``(history, end, end_kind)`` where history has
    shape (T, 4, n), ``end[i]`` is the last valid step index for trajectory i
    and ``end_kind`` is 0 (timeout), 1 (torso) or 2 (halt).  Torso ends are
    reported at the step whose height first crossed the torso level.
    """
    y = np.array(y0, dtype=np.float64)
    n = y.shape[1]
    hist = [y]
    end = np.full(n, -1)
    kind = np.zeros(n, dtype=np.int8)
    alive = ~starts_halted(y[3], y[1])
    end[~alive] = 0
    kind[~alive] = 2
    torso0 = alive & (y[0] * np.cos(y[1]) <= p.torso_height)
    end[torso0] = 0
    kind[torso0] = 1
    alive &= ~torso0
    n_steps = int(round(p.t_max / p.dt))
    for k in range(1, n_steps + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        y = y.copy()
        rd = rdot_d[idx] if np.ndim(rdot_d) else rdot_d
        ya = _rk4_batch(p, y[:, idx], rd, p.dt)
        if not np.all(np.isfinite(ya)):
            raise EnvironmentFault("batched fall integration produced non-finite states")
        y[:, idx] = ya
        hist.append(y)
        torso = ya[0] * np.cos(ya[1]) <= p.torso_height
        halt = ~torso & (ya[3] < 0)
        done = idx[torso | halt]
        end[done] = k
        kind[idx[torso]] = 1
        kind[idx[halt]] = 2
        alive[done] = False
    end[end < 0] = len(hist) - 1
    return np.stack(hist), end, kind


def substep_batch(p: FallModelParams, y0, rdot_d, fn):
    """Vectorized twin of the scalar event bisection for many trajectories.

    ``y0`` (4, n) are states at the step before the crossing; ``fn(y)``
    returns the event value for each column.  Returns ``(tau, y_event)``.
    """
    n = y0.shape[1]
    lo = np.zeros(n)
    hi = np.full(n, p.dt)
    y_hi = _rk4_batch(p, y0, rdot_d, hi)
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        y_mid = _rk4_batch(p, y0, rdot_d, mid)
        up = fn(y_mid) >= 0.0
        hi = np.where(up, mid, hi)
        y_hi = np.where(up, y_mid, y_hi)
        lo = np.where(up, lo, mid)
    return hi, y_hi


@dataclass(frozen=True)
class FallInitDist:
    """Gaussian over (r1, theta1, rdot1, thetadot1); c1 is fixed."""
    mean: tuple = (0.172, 0.12, 0.0, 0.6)
    std: tuple = (0.008, 0.06, 0.02, 0.3)
    c1: int = 0

    def sample(self, p: FallModelParams, rng, falling_only=False, max_tries=1000):
        for _ in range(max_tries):
            v = rng.normal(self.mean, self.std)
            v[0] = np.clip(v[0], p.r_min, p.r_max)
            if falling_only and starts_halted(v[3], v[1]):
                continue
            return AbstractFallState(self.c1, *map(float, v))
        raise RuntimeError("could not sample a falling initial state")


def sample_test_states(p: FallModelParams, dist: FallInitDist, n, rng):
    return [dist.sample(p, rng, falling_only=True) for _ in range(n)]


@dataclass
class FallEpisode:
    contacts: list = field(default_factory=list)   # (part, action, impulse)
    torso: bool = False

    @property
    def impulses(self):
        return [c[2] for c in self.contacts]

    @property
    def min_reward(self):
        return min((fall_reward(j) for j in self.impulses), default=1.0)

    @property
    def max_impulse(self):
        return max(self.impulses, default=0.0)


def run_fall_episode(p: FallModelParams, s0: AbstractFallState, controller, max_contacts=6):
    """Roll out a contact-level controller ``controller(state) -> (part, FallAction)``.

    Beyond ``max_contacts`` the remaining fall is evaluated as unplanned.
    """
    ep = FallEpisode()
    s = s0
    for _ in range(max_contacts):
        if starts_halted(s.thetadot1, s.theta1):
            return ep
        part, a = controller(s)
        out = fall_simulate_to_next_contact(p, s, part, a)
        if out.halted:
            return ep
        ep.contacts.append(("torso" if out.torso else part, a, out.impulse))
        if out.torso:
            ep.torso = True
            return ep
        s = out.state
    j, halted = fall_unplanned(p, s)
    if not halted:
        ep.contacts.append(("torso", None, j))
        ep.torso = True
    return ep
