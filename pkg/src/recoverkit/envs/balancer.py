"""Planar COM balancer: a point mass with viscous drag, saturated force input,
an anisotropic support region and an LQR baseline.

The state is ``(C, Cdot)`` with both 2-vectors; many episodes are stepped at
once by passing arrays of shape (n, 2).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass(frozen=True)
class Perturbation:
    theta: float
    magnitude: float
    duration: float = 0.2
    onset: float = 0.1

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("perturbation magnitude must be >= 0")
        if not self.duration > 0:
            raise ValueError("perturbation duration must be > 0")


@dataclass(frozen=True)
class BalancerParams:
    mass: float = 1.0
    drag: float = 0.5
    dt: float = 0.002
    control_dt: float = 0.02
    force_limit: float = 12.0
    support: tuple = (0.25, 0.15)      # semi-axes of the elliptical support region (m)
    target: tuple = (0.0, 0.0)

    @property
    def substeps(self):
        return int(round(self.control_dt / self.dt))


@dataclass
class BalancerState:
    C: np.ndarray
    Cdot: np.ndarray

    def as_array(self):
        return np.concatenate([self.C, self.Cdot])


def _zoh_coeffs(p: BalancerParams, h):
    """Exact one-step coefficients of m v' = u - c v under a force held constant over ``h``."""
    m, c = p.mass, p.drag
    if c == 0.0:
        return 1.0, h / m, h, 0.5 * h * h / m
    k = c / m
    e = np.exp(-k * h)
    # v+ = e v + (1 - e)/c u ;  x+ = x + (1 - e)/k v + (h - (1 - e)/k)/c u
    return e, (1.0 - e) / c, (1.0 - e) / k, (h - (1.0 - e) / k) / c


def perturbation_force(pert, t, n=None):
    """Force (..., 2) of one perturbation or of arrays ``(theta, magnitude, onset, duration)``."""
    if pert is None:
        return None
    if isinstance(pert, Perturbation):
        if pert.magnitude == 0.0 or not (pert.onset <= t < pert.onset + pert.duration):
            return None
        return pert.magnitude * np.array([np.cos(pert.theta), np.sin(pert.theta)])
    theta, mag, onset, dur = pert
    on = (onset <= t) & (t < onset + dur) & (mag > 0.0)
    if not np.any(on):
        return None
    f = np.zeros((len(mag), 2))
    f[on, 0] = mag[on] * np.cos(theta[on])
    f[on, 1] = mag[on] * np.sin(theta[on])
    return f


def balancer_step(p: BalancerParams, C, Cdot, force, pert=None, t=0.0):
    """Advance one simulation step of length ``p.dt``.

    ``force`` is saturated per axis at ``force_limit``.  A perturbation adds
    its force while ``onset <= t < onset + duration``; zero-magnitude or
    inactive perturbations leave the update untouched.  The linear dynamics
    are integrated exactly for a force held over the step.
    """
    u = np.clip(force, -p.force_limit, p.force_limit)
    f = perturbation_force(pert, t)
    if f is not None:
        u = u + f
    a, b, c, d = _zoh_coeffs(p, p.dt)
    C_new = C + c * Cdot + d * u
    V_new = a * Cdot + b * u
    if not (np.all(np.isfinite(C_new)) and np.all(np.isfinite(V_new))):
        raise FloatingPointError("balancer produced a non-finite state")
    return C_new, V_new


def closed_form(p: BalancerParams, C0, V0, force, t):
    """Position and velocity after constant ``force`` for time ``t`` (no saturation)."""
    return _zoh_coeffs_apply(p, np.asarray(C0, float), np.asarray(V0, float), np.asarray(force, float), t)


def _zoh_coeffs_apply(p, C, V, u, t):
    a, b, c, d = _zoh_coeffs(p, t)
    return C + c * V + d * u, a * V + b * u


def outside_support(p: BalancerParams, C):
    tgt = np.asarray(p.target)
    q = ((C - tgt) / np.asarray(p.support)) ** 2
    return q.sum(axis=-1) > 1.0


def balance_reward(C, Cdot, w_p=1.0, w_d=0.1, target=(0.0, 0.0)):
    d = np.asarray(C) - np.asarray(target)
    return -w_p * np.sum(d * d, axis=-1) - w_d * np.sum(np.asarray(Cdot) ** 2, axis=-1)


def lqr_gain(p: BalancerParams, q_pos=20.0, q_vel=1.0, r=0.2):
    """Continuous-time LQR gain (2x4) for the drag double integrator."""
    m, c = p.mass, p.drag
    I2 = np.eye(2)
    A = np.block([[np.zeros((2, 2)), I2], [np.zeros((2, 2)), -c / m * I2]])
    B = np.vstack([np.zeros((2, 2)), I2 / m])
    Q = np.diag([q_pos, q_pos, q_vel, q_vel])
    R = r * I2
    P = scipy.linalg.solve_continuous_are(A, B, Q, R)
    return np.linalg.solve(R, B.T @ P)


def closed_loop_matrix(p: BalancerParams, K):
    m, c = p.mass, p.drag
    I2 = np.eye(2)
    A = np.block([[np.zeros((2, 2)), I2], [np.zeros((2, 2)), -c / m * I2]])
    B = np.vstack([np.zeros((2, 2)), I2 / m])
    return A - B @ K


def lqr_action(K, C, Cdot, target=(0.0, 0.0)):
    """``u = -K [C - target; Cdot]`` for one state or a batch."""
    x = np.concatenate([np.asarray(C) - np.asarray(target), np.asarray(Cdot)], axis=-1)
    return -(x @ np.asarray(K).T)
