"""Cart-pole with observable inertial parameters and unobservable friction,
plus a vectorized swing-up task.

State is ``(x, xdot, phi, phidot)`` with ``phi = 0`` upright and ``phi = pi``
hanging.  The pole is a uniform rod of full length ``pole_length``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

MU_FIELDS = ("pole_length", "pole_mass", "cart_mass")
NU_FIELDS = ("rot_damping", "rot_friction", "trans_friction")


class CartpoleFault(FloatingPointError):
    pass


@dataclass(frozen=True)
class CartpoleParams:
    pole_length: float = 1.0        # m, full rod length
    pole_mass: float = 0.1          # kg
    cart_mass: float = 1.0          # kg
    rot_damping: float = 0.0        # N m s / rad
    rot_friction: float = 0.0       # N m (Coulomb)
    trans_friction: float = 0.0     # N (Coulomb)
    step_dt: float = 0.005          # s
    gravity: float = 9.8

    def __post_init__(self):
        if min(self.pole_length, self.pole_mass, self.cart_mass) <= 0:
            raise ValueError("lengths and masses must be > 0")
        if min(self.rot_damping, self.rot_friction, self.trans_friction) < 0:
            raise ValueError("damping and frictions must be >= 0")

    @property
    def mu(self):
        return np.array([getattr(self, f) for f in MU_FIELDS])

    @property
    def nu(self):
        return np.array([getattr(self, f) for f in NU_FIELDS])

    def with_dynamics(self, mu=None, nu=None):
        kw = {}
        if mu is not None:
            kw.update(zip(MU_FIELDS, map(float, mu)))
        if nu is not None:
            kw.update(zip(NU_FIELDS, map(float, nu)))
        return replace(self, **kw)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def dyn_matrix(params_list):
    """(n, 6) array of (mu, nu) rows for per-episode dynamics."""
    return np.array([np.concatenate([p.mu, p.nu]) for p in params_list])


def cartpole_accel(dyn, s, u, gravity=9.8):
    """Accelerations ``(xddot, phiddot)`` for states ``s`` (..., 4).

    ``dyn`` holds ``(pole_length, pole_mass, cart_mass, rot_damping,
    rot_friction, trans_friction)`` along its last axis (broadcastable).
    """
    dyn = np.asarray(dyn, dtype=np.float64)
    length, mp, mc = dyn[..., 0], dyn[..., 1], dyn[..., 2]
    damp, rfric, tfric = dyn[..., 3], dyn[..., 4], dyn[..., 5]
    xd, phi, phid = s[..., 1], s[..., 2], s[..., 3]
    half = 0.5 * length
    total = mp + mc
    sin, cos = np.sin(phi), np.cos(phi)
    force = u - tfric * np.sign(xd)
    torque = -damp * phid - rfric * np.sign(phid)
    tmp = (force + mp * half * phid * phid * sin) / total
    phidd = (gravity * sin - cos * tmp + torque / (mp * half)) / (half * (4.0 / 3.0 - mp * cos * cos / total))
    xdd = tmp - mp * half * phidd * cos / total
    return xdd, phidd


def cartpole_step(p: CartpoleParams, s, u, dyn=None):
    """One semi-implicit Euler step of length ``p.step_dt``.

    ``dyn`` overrides the parameters of ``p`` per episode (see :func:`dyn_matrix`).
    """
    s = np.asarray(s, dtype=np.float64)
    if dyn is None:
        dyn = np.concatenate([p.mu, p.nu])
    xdd, phidd = cartpole_accel(dyn, s, u, p.gravity)
    h = p.step_dt
    xd = s[..., 1] + h * xdd
    phid = s[..., 3] + h * phidd
    out = np.stack([s[..., 0] + h * xd, xd, s[..., 2] + h * phid, phid], axis=-1)
    if not np.all(np.isfinite(out)):
        raise CartpoleFault("cartpole produced a non-finite state")
    return out


def wrap_angle(phi):
    return np.mod(np.asarray(phi) + np.pi, 2.0 * np.pi) - np.pi


@dataclass
class GaussianStart:
    """Initial-state distribution N(mean, diag(std**2)) or N(mean, cov)."""
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.ndim == 1:
            self.cov = np.diag(self.cov)
        if not np.allclose(self.cov, self.cov.T):
            raise ValueError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(self.cov)) < -1e-12:
            raise ValueError("covariance must be positive semidefinite")

    @classmethod
    def diagonal(cls, mean, std):
        return cls(np.asarray(mean, float), np.asarray(std, float) ** 2)

    def sample(self, n, rng):
        return rng.multivariate_normal(self.mean, self.cov, size=n, method="cholesky")

    def inflated(self, factor):
        return GaussianStart(self.mean.copy(), self.cov * factor)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["cov"])


HANGING = GaussianStart.diagonal([0.0, 0.0, np.pi, 0.0], [0.05, 0.05, 0.05, 0.05])
UPRIGHT = GaussianStart.diagonal([0.0, 0.0, 0.0, 0.0], [0.05, 0.05, 0.05, 0.05])


@dataclass
class SwingupConfig:
    force_limit: float = 10.0
    track_limit: float = 2.4
    control_dt: float = 0.02
    episode_time: float = 4.0
    gamma: float = 0.99
    success_angle: float = 0.2
    success_rate: float = 1.0       # |phidot| bound for success at episode end


class SwingupTask:
    """Vectorized swing-up episodes.

    Per-step reward is ``(1 + cos phi) / 2``; leaving the track terminates.
    ``dyn_sampler(n, rng) -> (n, 6)`` draws per-episode dynamics; the default
    repeats ``params``.  Observations are ``(x, xdot, cos phi, sin phi, phidot)``
    scaled to order one.
    """

    obs_dim = 5
    act_dim = 1
    state_dim = 4

    def __init__(self, params: CartpoleParams = None, cfg: SwingupConfig = None,
                 start: GaussianStart = None, dyn_sampler=None):
        self.p = params or CartpoleParams()
        self.cfg = cfg or SwingupConfig()
        self.start = start or HANGING
        self.dyn_sampler = dyn_sampler
        self.gamma = self.cfg.gamma
        self.n_steps = int(round(self.cfg.episode_time / self.cfg.control_dt))
        self.substeps = int(round(self.cfg.control_dt / self.p.step_dt))

    def _dyn(self, n, rng):
        if self.dyn_sampler is None:
            return np.tile(np.concatenate([self.p.mu, self.p.nu]), (n, 1))
        return np.asarray(self.dyn_sampler(n, rng), dtype=np.float64)

    def reset(self, n, rng, states=None):
        s = self.start.sample(n, rng) if states is None else np.array(states, dtype=np.float64)
        return {"s": s, "k": np.zeros(n, dtype=int), "dyn": self._dyn(n, rng),
                "failed": np.zeros(n, dtype=bool)}

    def observe_states(self, s):
        s = np.asarray(s)
        return np.stack([s[..., 0] / self.cfg.track_limit, s[..., 1] / 2.0, np.cos(s[..., 2]),
                         np.sin(s[..., 2]), s[..., 3] / 5.0], axis=-1)

    def observe_jacobian(self, s):
        """d observation / d state for one state (5, 4)."""
        J = np.zeros((5, 4))
        J[0, 0] = 1.0 / self.cfg.track_limit
        J[1, 1] = 0.5
        J[2, 2] = -np.sin(s[2])
        J[3, 2] = np.cos(s[2])
        J[4, 3] = 0.2
        return J

    def observe(self, state):
        return self.observe_states(state["s"])

    def force(self, action):
        return np.clip(np.asarray(action)[..., 0], -1.0, 1.0) * self.cfg.force_limit

    def step(self, state, action, rng=None):
        u = self.force(action)
        s = state["s"]
        dyn = state["dyn"]
        for _ in range(self.substeps):
            s = cartpole_step(self.p, s, u, dyn)
        k = state["k"] + 1
        failed = np.abs(s[:, 0]) > self.cfg.track_limit
        r = np.where(failed, 0.0, 0.5 * (1.0 + np.cos(s[:, 2])))
        nxt = dict(state, s=s, k=k, failed=failed)
        trunc = (k >= self.n_steps) & ~failed
        return nxt, r, failed, trunc

    def success(self, state):
        s = state["s"]
        return ((np.abs(wrap_angle(s[:, 2])) < self.cfg.success_angle)
                & (np.abs(s[:, 3]) < self.cfg.success_rate) & ~state["failed"])

    def episode_info(self, state):
        return [None] * len(state["k"])
