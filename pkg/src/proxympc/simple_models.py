"""Low-dimensional proxy dynamics: a cart-pole and a rigid link.

State layouts (plain float64 vectors):
    cart-pole  z = [x_cart, x_mass, y_mass, xdot_cart, thetadot]   (n = 5)
    rigid link z = [pL_x, pL_y, pL_z, pR_x, pR_y, pR_z]            (n = 6)

The cart-pole angle is measured from the downward vertical, so theta = 0
is the hanging rest configuration.  The pendulum length is not a model
parameter: it is recovered from the mass position relative to the pivot
whenever a state enters the dynamics and held fixed for that step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81
MIN_LENGTH = 1e-6

CARTPOLE_DIM = 5
RIGIDLINK_DIM = 6


@dataclass
class CartPoleParams:
    """Physical parameters of the cart-pole, all strictly positive."""

    mass_cart: float = 1.0
    mass_pole: float = 0.3
    angular_damping: float = 0.05

    def __post_init__(self):
        # damping may be exactly zero (conservative pole); masses may not
        if self.mass_cart <= 0 or self.mass_pole <= 0 or self.angular_damping < 0:
            raise ValueError(f"invalid cart-pole parameters {self}")

    def as_vector(self):
        return np.array([self.mass_cart, self.mass_pole, self.angular_damping])

    @classmethod
    def from_vector(cls, v):
        return cls(mass_cart=float(v[0]), mass_pole=float(v[1]), angular_damping=float(v[2]))


@dataclass
class ControlBounds:
    """Per-dimension action box; used by the planner and the environments."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("invalid control bounds")

    @property
    def dim(self) -> int:
        return self.lo.size

    def clamp(self, u):
        return np.clip(u, self.lo, self.hi)

    def sample(self, rng, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lo, self.hi, size=shape)


@dataclass
class ObservationMap:
    """Linear selector y = C z with a per-dimension variance floor."""

    C: np.ndarray
    r_floor: np.ndarray

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        self.r_floor = np.asarray(self.r_floor, dtype=float)
        m, n = self.C.shape
        expected = np.hstack([np.eye(m), np.zeros((m, n - m))])
        if not np.array_equal(self.C, expected):
            raise ValueError("C must be the leading-identity selector [I, 0]")
        if self.r_floor.shape != (m,) or np.any(self.r_floor <= 0):
            raise ValueError("r_floor must be a strictly positive m-vector")

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[1]

    def lift(self, y):
        """Pseudo-inverse lift: observed dims copied, unobserved dims zero."""
        z = np.zeros(self.n)
        z[: self.m] = y
        return z


def cartpole_observation_map(r_floor: float = 1e-4) -> ObservationMap:
    C = np.hstack([np.eye(3), np.zeros((3, 2))])
    return ObservationMap(C=C, r_floor=np.full(3, r_floor))


def rigidlink_observation_map(r_floor: float = 1e-4) -> ObservationMap:
    return ObservationMap(C=np.eye(6), r_floor=np.full(6, r_floor))


def cartpole_bounds(force_max: float = 10.0) -> ControlBounds:
    return ControlBounds(lo=np.array([-force_max]), hi=np.array([force_max]))


def rigidlink_bounds(delta_max: float = 0.05) -> ControlBounds:
    return ControlBounds(lo=np.full(6, -delta_max), hi=np.full(6, delta_max))


def cartpole_geometry(z, pivot_height: float = 0.0):
    """Recover (theta, length) from the mass position relative to the pivot."""
    dx = z[1] - z[0]
    dy = z[2] - pivot_height
    length = math.hypot(dx, dy)
    theta = math.atan2(dx, -dy)
    return theta, length


def _cartpole_derivs(x, theta, xdot, thetadot, force, length, p: CartPoleParams,
                     damping: float):
    sin, cos = math.sin(theta), math.cos(theta)
    denom = p.mass_cart + p.mass_pole * sin * sin
    xddot = (force
             + damping * thetadot * cos / length
             + p.mass_pole * sin * (GRAVITY * cos + length * thetadot * thetadot)) / denom
    thetaddot = -(xddot * cos + GRAVITY * sin
                  + damping * thetadot / (p.mass_pole * length)) / length
    return xdot, thetadot, xddot, thetaddot


def cartpole_step(z, u, params: CartPoleParams, dt: float, pivot_height: float = 0.0,
                  substeps: int = 1):
    """Advance the cart-pole one step of ``dt`` with fixed-step RK4.

    The damping torque -angular_damping * thetadot acts at the hinge.  The
    derived pendulum length is held constant across the step, and the output
    mass position is reconstructed from the output angle.
    """
    z = np.asarray(z, dtype=float)
    if dt <= 0:
        raise ValueError("dt must be > 0")
    theta, length = cartpole_geometry(z, pivot_height)
    if length < MIN_LENGTH:
        raise ValueError(f"degenerate pendulum length {length}")
    force = float(np.asarray(u).reshape(-1)[0])
    b = params.angular_damping

    state = (float(z[0]), theta, float(z[3]), float(z[4]))
    h = dt / substeps
    for _ in range(substeps):
        k1 = _cartpole_derivs(*state, force, length, params, b)
        s2 = tuple(s + 0.5 * h * k for s, k in zip(state, k1))
        k2 = _cartpole_derivs(*s2, force, length, params, b)
        s3 = tuple(s + 0.5 * h * k for s, k in zip(state, k2))
        k3 = _cartpole_derivs(*s3, force, length, params, b)
        s4 = tuple(s + h * k for s, k in zip(state, k3))
        k4 = _cartpole_derivs(*s4, force, length, params, b)
        state = tuple(s + (h / 6.0) * (a + 2 * b2 + 2 * c + d)
                      for s, a, b2, c, d in zip(state, k1, k2, k3, k4))

    x, theta, xdot, thetadot = state
    return np.array([x,
                     x + length * math.sin(theta),
                     pivot_height - length * math.cos(theta),
                     xdot,
                     thetadot])


def rigidlink_step(z, u):
    """Move both endpoints by the commanded deltas, then restore the length.

    The correction is split equally between the endpoints along the
    connecting axis, so the midpoint of the displaced link is preserved.
    """
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float).reshape(6)
    p_l, p_r = z[:3], z[3:]
    rest = np.linalg.norm(p_l - p_r)
    if rest <= 0:
        raise ValueError("link endpoints coincide")
    p_l = p_l + u[:3]
    p_r = p_r + u[3:]
    axis = p_l - p_r
    dist = np.linalg.norm(axis)
    if dist < MIN_LENGTH:
        raise ValueError("displaced endpoints coincide; projection undefined")
    corr = 0.5 * (dist - rest) / dist
    p_l = p_l - corr * axis
    p_r = p_r + corr * axis
    return np.concatenate([p_l, p_r])


def observe(z, obs_map: ObservationMap):
    """Latent observation y = C z."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != obs_map.n:
        raise ValueError(f"state dim {z.shape[-1]} does not match C ({obs_map.n})")
    return z[..., : obs_map.m].copy()


@dataclass
class SimpleModel:
    """Bundle of a proxy model's dynamics, observation map, and bounds.

    ``kind`` is "cartpole" or "rigidlink".  ``step(z, u, params)`` advances a
    single state; ``step_batch`` advances a (B, n) array of states under a
    (B, c) array of controls, which is what the sampling controller uses.
    """

    kind: str
    obs_map: ObservationMap
    bounds: ControlBounds
    dt: float = 0.05
    pivot_height: float = 0.0
    default_params: CartPoleParams | None = None

    @property
    def state_dim(self) -> int:
        return CARTPOLE_DIM if self.kind == "cartpole" else RIGIDLINK_DIM

    @property
    def control_dim(self) -> int:
        return self.bounds.dim

    def step(self, z, u, params=None):
        if self.kind == "cartpole":
            return cartpole_step(z, u, params or self.default_params, self.dt,
                                 self.pivot_height)
        return rigidlink_step(z, u)

    def step_batch(self, Z, U, params=None):
        if self.kind == "cartpole":
            return _cartpole_step_batch(Z, U, params or self.default_params,
                                        self.dt, self.pivot_height)
        return _rigidlink_step_batch(Z, U)


def _cartpole_step_batch(Z, U, params: CartPoleParams, dt, pivot_height):
    """Vectorized RK4 over a batch of cart-pole states."""
    Z = np.asarray(Z, dtype=float)
    dx = Z[:, 1] - Z[:, 0]
    dy = Z[:, 2] - pivot_height
    length = np.hypot(dx, dy)
    theta = np.arctan2(dx, -dy)
    force = np.asarray(U, dtype=float).reshape(Z.shape[0])
    b = params.angular_damping

    def derivs(x, th, xd, thd):
        sin, cos = np.sin(th), np.cos(th)
        denom = params.mass_cart + params.mass_pole * sin * sin
        xdd = (force + b * thd * cos / length
               + params.mass_pole * sin * (GRAVITY * cos + length * thd * thd)) / denom
        thdd = -(xdd * cos + GRAVITY * sin
                 + b * thd / (params.mass_pole * length)) / length
        return xd, thd, xdd, thdd

    state = (Z[:, 0], theta, Z[:, 3], Z[:, 4])
    k1 = derivs(*state)
    k2 = derivs(*(s + 0.5 * dt * k for s, k in zip(state, k1)))
    k3 = derivs(*(s + 0.5 * dt * k for s, k in zip(state, k2)))
    k4 = derivs(*(s + dt * k for s, k in zip(state, k3)))
    x, th, xd, thd = (s + (dt / 6.0) * (a + 2 * b2 + 2 * c + d)
                      for s, a, b2, c, d in zip(state, k1, k2, k3, k4))
    return np.stack([x, x + length * np.sin(th), pivot_height - length * np.cos(th),
                     xd, thd], axis=1)


def _rigidlink_step_batch(Z, U):
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    p_l = Z[:, :3] + U[:, :3]
    p_r = Z[:, 3:] + U[:, 3:]
    rest = np.linalg.norm(Z[:, :3] - Z[:, 3:], axis=1)
    axis = p_l - p_r
    dist = np.linalg.norm(axis, axis=1)
    dist = np.maximum(dist, MIN_LENGTH)
    corr = (0.5 * (dist - rest) / dist)[:, None]
    return np.concatenate([p_l - corr * axis, p_r + corr * axis], axis=1)


def make_cartpole_model(dt: float = 0.05, pivot_height: float = 0.0,
                        force_max: float = 10.0,
                        params: CartPoleParams | None = None) -> SimpleModel:
    return SimpleModel(kind="cartpole", obs_map=cartpole_observation_map(),
                       bounds=cartpole_bounds(force_max), dt=dt,
                       pivot_height=pivot_height,
                       default_params=params or CartPoleParams())


def make_rigidlink_model(delta_max: float = 0.05) -> SimpleModel:
    return SimpleModel(kind="rigidlink", obs_map=rigidlink_observation_map(),
                       bounds=rigidlink_bounds(delta_max), dt=0.05)
