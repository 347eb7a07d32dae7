"""Pose, dynamics, obstacle and inter-robot factors for 2-D double-integrator robots.

States are stacked as [x, y, vx, vy].  Every measurement function comes with an
analytic Jacobian; the ``*_terms`` helpers work on arbitrary leading batch axes so
the fleet sweeps can evaluate thousands of factors in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

STATE_DIM = 4
POSE, DYNAMICS, OBSTACLE, INTERROBOT = "pose", "dynamics", "obstacle", "interrobot"
INTERNAL_KINDS = frozenset({POSE, DYNAMICS, OBSTACLE})
OVERLAP_DIRECTION = np.array([1.0, 0.0])


class DistanceField(Protocol):
    def sample(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class RobotState:
    pos: np.ndarray
    vel: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=np.float64).reshape(2)
        vel = np.asarray(self.vel, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("RobotState entries must be finite")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "vel", vel)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    @classmethod
    def from_vector(cls, x) -> RobotState:
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:2], x[2:4])


@dataclass(frozen=True)
class FactorParams:
    sigma_p: float = 1e-15
    sigma_d: float = 1.0
    sigma_o: float = 0.005
    sigma_r: float = 0.005
    robot_radius: float = 2.0
    epsilon: float = 0.2
    comm_radius: float = 50.0
    obstacle_margin: float = 0.0   # 0 keeps h_o active only inside r_R

    def __post_init__(self):
        for name in ("sigma_p", "sigma_d", "sigma_o", "sigma_r", "robot_radius", "comm_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.obstacle_margin < 0:
            raise ValueError("obstacle_margin must be non-negative")

    @property
    def obstacle_radius(self) -> float:
        return self.robot_radius + self.obstacle_margin

    @property
    def critical_distance(self) -> float:
        return 2.0 * self.robot_radius + self.epsilon


@dataclass
class FactorDefinition:
    """Measurement model of one factor: h, its Jacobian, z and the precision."""

    kind: str
    dims: tuple[int, ...]
    z: np.ndarray
    meas_precision: np.ndarray
    h: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    diagnostics: dict = field(default_factory=dict)

    @property
    def linear(self) -> bool:
        return self.kind in (POSE, DYNAMICS)


# --- pose -----------------------------------------------------------------

def pose_precision(sigma_p: float) -> np.ndarray:
    return np.eye(STATE_DIM) / sigma_p**2


def pose_factor(anchor, sigma_p: float) -> FactorDefinition:
    if not sigma_p > 0:
        raise ValueError("sigma_p must be positive")
    anchor = np.asarray(anchor.vector if isinstance(anchor, RobotState) else anchor, dtype=np.float64)
    return FactorDefinition(
        kind=POSE,
        dims=(STATE_DIM,),
        z=anchor.copy(),
        meas_precision=pose_precision(sigma_p),
        h=lambda x: np.asarray(x, dtype=np.float64).copy(),
        jacobian=lambda x: np.eye(STATE_DIM),
    )


# --- dynamics -------------------------------------------------------------

def transition(dt) -> np.ndarray:
    """Constant-velocity transition Phi(dt) = [[I, dt I], [0, I]], batched over dt."""
    dt = np.asarray(dt, dtype=np.float64)
    phi = np.broadcast_to(np.eye(STATE_DIM), dt.shape + (STATE_DIM, STATE_DIM)).copy()
    phi[..., 0, 2] = dt
    phi[..., 1, 3] = dt
    return phi


def dynamics_covariance(dt, sigma_d) -> np.ndarray:
    """Process covariance of the noise-on-acceleration model (the matrix inverted below)."""
    dt = np.asarray(dt, dtype=np.float64)
    q = np.asarray(sigma_d, dtype=np.float64) ** 2
    q = np.broadcast_to(q, dt.shape)
    cov = np.zeros(dt.shape + (STATE_DIM, STATE_DIM))
    for axis in (0, 1):
        cov[..., axis, axis] = dt**3 / 3.0 * q
        cov[..., axis, axis + 2] = dt**2 / 2.0 * q
        cov[..., axis + 2, axis] = dt**2 / 2.0 * q
        cov[..., axis + 2, axis + 2] = dt * q
    return cov


def dynamics_precision(dt, sigma_d) -> np.ndarray:
    """Closed-form inverse of ``dynamics_covariance``; per axis [[12/dt^3, -6/dt^2], [-6/dt^2, 4/dt]] / q."""
    dt = np.asarray(dt, dtype=np.float64)
    q = np.broadcast_to(np.asarray(sigma_d, dtype=np.float64) ** 2, dt.shape)
    lam = np.zeros(dt.shape + (STATE_DIM, STATE_DIM))
    for axis in (0, 1):
        lam[..., axis, axis] = 12.0 / dt**3 / q
        lam[..., axis, axis + 2] = -6.0 / dt**2 / q
        lam[..., axis + 2, axis] = -6.0 / dt**2 / q
        lam[..., axis + 2, axis + 2] = 4.0 / dt / q
    return lam


def dynamics_jacobian(dt) -> np.ndarray:
    phi = transition(dt)
    minus_eye = np.broadcast_to(-np.eye(STATE_DIM), phi.shape)
    return np.concatenate([phi, minus_eye], axis=-1)


def dynamics_h(x_k: np.ndarray, x_next: np.ndarray, dt) -> np.ndarray:
    return (transition(dt) @ np.asarray(x_k)[..., None])[..., 0] - x_next


def dynamics_joint_precision(dt, sigma_d) -> np.ndarray:
    """J^T Lambda_d J over the stacked pair (x_k, x_k+1); the factor's likelihood precision."""
    jac = dynamics_jacobian(dt)
    return np.swapaxes(jac, -1, -2) @ dynamics_precision(dt, sigma_d) @ jac


def dynamics_factor(dt: float, sigma_d: float) -> FactorDefinition:
    if not dt > 0:
        raise ValueError("dynamics factor needs dt > 0")
    jac = dynamics_jacobian(dt)
    return FactorDefinition(
        kind=DYNAMICS,
        dims=(STATE_DIM, STATE_DIM),
        z=np.zeros(STATE_DIM),
        meas_precision=dynamics_precision(dt, sigma_d),
        h=lambda x: dynamics_h(x[:STATE_DIM], x[STATE_DIM:], dt),
        jacobian=lambda x: jac.copy(),
    )


# --- obstacle -------------------------------------------------------------

def obstacle_terms(distance, gradient, radius):
    """h and Jacobian rows (..., 4) of the obstacle factor given sampled SDF values.

    At distance == radius the inside branch is used; h is 0 there anyway.
    """
    distance = np.asarray(distance, dtype=np.float64)
    radius = np.asarray(radius, dtype=np.float64)
    inside = distance <= radius
    h = np.where(inside, 1.0 - distance / radius, 0.0)
    jac = np.zeros(distance.shape + (STATE_DIM,))
    jac[..., :2] = np.where(inside[..., None], -np.asarray(gradient) / radius[..., None], 0.0)
    return h, jac


def obstacle_factor(sdf: DistanceField, r_R: float, sigma_o: float) -> FactorDefinition:
    diagnostics = {"clamped_queries": 0}

    def sample(x):
        d, g = sdf.sample(np.asarray(x, dtype=np.float64)[:2])
        return d, g

    def h(x):
        d, g = sample(x)
        return np.atleast_1d(obstacle_terms(d, g, r_R)[0])

    def jacobian(x):
        d, g = sample(x)
        return obstacle_terms(d, g, r_R)[1].reshape(1, STATE_DIM)

    return FactorDefinition(
        kind=OBSTACLE,
        dims=(STATE_DIM,),
        z=np.zeros(1),
        meas_precision=np.array([[sigma_o**-2]]),
        h=h,
        jacobian=jacobian,
        diagnostics=diagnostics,
    )


# --- inter-robot ----------------------------------------------------------

def interrobot_precision(t_k, sigma_r) -> np.ndarray:
    return (np.asarray(t_k, dtype=np.float64) * sigma_r) ** -2


def interrobot_terms(pos_a, pos_b, r_star):
    """h and Jacobian rows (..., 8) over the stacked pair (x_A, x_B).

    Exactly overlapping robots use the fixed direction [1, 0].
    """
    diff = np.asarray(pos_a, dtype=np.float64) - np.asarray(pos_b, dtype=np.float64)
    r_star = np.asarray(r_star, dtype=np.float64)
    dist = np.linalg.norm(diff, axis=-1)
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[..., None], diff / safe[..., None], OVERLAP_DIRECTION)
    inside = dist <= r_star
    h = np.where(inside, 1.0 - dist / r_star, 0.0)
    jac = np.zeros(dist.shape + (2 * STATE_DIM,))
    row = np.where(inside[..., None], unit / r_star[..., None], 0.0)
    jac[..., 0:2] = -row
    jac[..., 4:6] = row
    return h, jac


def interrobot_factor(t_k: float, params: FactorParams, r_star: float | None = None) -> FactorDefinition:
    if not t_k > 0:
        raise ValueError("inter-robot factors attach to future states only (t_k > 0)")
    r_star = params.critical_distance if r_star is None else r_star

    def h(x):
        return np.atleast_1d(interrobot_terms(x[:2], x[4:6], r_star)[0])

    def jacobian(x):
        return interrobot_terms(x[:2], x[4:6], r_star)[1].reshape(1, 2 * STATE_DIM)

    return FactorDefinition(
        kind=INTERROBOT,
        dims=(STATE_DIM, STATE_DIM),
        z=np.zeros(1),
        meas_precision=np.array([[interrobot_precision(t_k, params.sigma_r)]]),
        h=h,
        jacobian=jacobian,
    )


def pair_critical_distance(radius_a, radius_b, epsilon):
    """r* for a pair; reduces to 2 r_R + eps for equal radii."""
    return np.asarray(radius_a) + np.asarray(radius_b) + epsilon
