"""Analytic benchmark environments.

Cartpole with a walled rail (state ``[x, x_dot, phi, phi_dot]``, ``phi = 0``
upright), a gravity-free damped two-link reacher (state ``[q1, q2, q1_dot,
q2_dot, target_x, target_y]``) and the shaped half-cheetah reward.

Step functions take one state; reward functions broadcast over leading axes
so planners can score whole trajectory tensors at once.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Tuple

import numpy as np

from dgpmpc.errors import ConfigError, InvalidArgumentError, InvalidStateError


class StartMode(str, enum.Enum):
    AT_END = "at_end"
    AT_CENTER = "at_center"


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    gravity: float = 9.81
    rail_half_width: float = 1.5
    dt: float = 0.05
    force_limit: float = 10.0
    start_mode: StartMode = StartMode.AT_END
    goal_x: float = -1.2
    # tuned so a 30-step horizon (1.5 s) sees the swing-up payoff
    reward_width: float = 0.75
    action_cost: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "start_mode", StartMode(self.start_mode))
        for name in ("cart_mass", "pole_mass", "pole_half_length", "rail_half_width", "force_limit", "reward_width"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if not 0 < self.dt <= 0.05:
            raise InvalidArgumentError(f"dt must lie in (0, 0.05], got {self.dt}")
        if abs(self.goal_x) > self.rail_half_width:
            raise InvalidArgumentError("goal_x must lie on the rail")

    @classmethod
    def modified(cls, **kw) -> "CartpoleParams":
        kw.setdefault("rail_half_width", 1.5)
        kw.setdefault("goal_x", -kw["rail_half_width"] + 0.3)
        return cls(start_mode=StartMode.AT_END, **kw)

    @classmethod
    def centered(cls, **kw) -> "CartpoleParams":
        return cls(start_mode=StartMode.AT_CENTER, goal_x=0.0, **kw)


@dataclass(frozen=True)
class ReacherParams:
    link_lengths: Tuple[float, float] = (0.25, 0.25)
    dt: float = 0.025
    torque_limit: float = 1.0
    damping: float = 0.1
    target_mean: Tuple[float, float] = (0.35, 0.05)
    target_cov_diag: Tuple[float, float] = (0.05**2, 0.05**2)
    action_cost_weight: float = 0.01

    def __post_init__(self):
        if len(self.link_lengths) != 2 or min(self.link_lengths) <= 0:
            raise InvalidArgumentError("link_lengths must be two positive numbers")
        if self.dt <= 0 or self.torque_limit <= 0:
            raise InvalidArgumentError("dt and torque_limit must be positive")
        if min(self.target_cov_diag) < 0 or self.action_cost_weight < 0:
            raise InvalidArgumentError("target variances and action cost must be non-negative")

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))


def rk4(deriv: Callable, y: np.ndarray, u, dt: float) -> np.ndarray:
    k1 = deriv(y, u)
    k2 = deriv(y + 0.5 * dt * k1, u)
    k3 = deriv(y + 0.5 * dt * k2, u)
    k4 = deriv(y + dt * k3, u)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_finite(state: np.ndarray) -> None:
    if not np.all(np.isfinite(state)):
        raise InvalidStateError(f"non-finite state {state}")


# ---------------------------------------------------------------- cartpole


def cartpole_derivatives(state: np.ndarray, force, params: CartpoleParams) -> np.ndarray:
    """Frictionless cartpole with a uniform rod; vectorised over leading axes."""
    x_dot, phi, phi_dot = state[..., 1], state[..., 2], state[..., 3]
    total = params.cart_mass + params.pole_mass
    ml = params.pole_mass * params.pole_half_length
    sin, cos = np.sin(phi), np.cos(phi)
    temp = (force + ml * phi_dot**2 * sin) / total
    phi_acc = (params.gravity * sin - cos * temp) / (
        params.pole_half_length * (4.0 / 3.0 - params.pole_mass * cos**2 / total)
    )
    x_acc = temp - ml * phi_acc * cos / total
    return np.stack([x_dot, x_acc, phi_dot, phi_acc], axis=-1)


def cartpole_integrate(state: np.ndarray, action, params: CartpoleParams) -> np.ndarray:
    """One clipped-force RK4 step followed by the wall clamp; vectorised."""
    state = np.asarray(state, dtype=np.float64)
    force = np.clip(np.asarray(action, dtype=np.float64)[..., 0], -params.force_limit, params.force_limit)
    nxt = rk4(lambda y, u: cartpole_derivatives(y, u, params), state, force, params.dt)
    hit = np.abs(nxt[..., 0]) > params.rail_half_width
    if np.any(hit):
        nxt = nxt.copy()
        nxt[..., 0] = np.where(hit, np.sign(nxt[..., 0]) * params.rail_half_width, nxt[..., 0])
        nxt[..., 1] = np.where(hit, 0.0, nxt[..., 1])
    return nxt


def cartpole_step(state, action, params: CartpoleParams) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    _check_finite(state)
    if state.shape != (4,):
        raise InvalidArgumentError(f"cartpole state must have 4 entries, got shape {state.shape}")
    nxt = cartpole_integrate(state, np.atleast_1d(action), params)
    _check_finite(nxt)
    return nxt


def cartpole_tip(state, params: CartpoleParams) -> Tuple[np.ndarray, np.ndarray]:
    state = np.asarray(state, dtype=np.float64)
    pole = 2.0 * params.pole_half_length
    return state[..., 0] + pole * np.sin(state[..., 2]), pole * np.cos(state[..., 2])


def cartpole_reward(state, action, params: CartpoleParams):
    """exp(-d^2 / w^2) - c * a^2 with d the tip-to-goal distance."""
    tx, ty = cartpole_tip(state, params)
    gx, gy = params.goal_x, 2.0 * params.pole_half_length
    d2 = (tx - gx) ** 2 + (ty - gy) ** 2
    a = np.asarray(action, dtype=np.float64)[..., 0]
    return np.exp(-d2 / params.reward_width**2) - params.action_cost * a**2


def cartpole_energy(state, params: CartpoleParams) -> float:
    x_dot, phi, phi_dot = state[1], state[2], state[3]
    m, l = params.pole_mass, params.pole_half_length
    kinetic = (
        0.5 * (params.cart_mass + m) * x_dot**2
        + m * l * x_dot * phi_dot * math.cos(phi)
        + 0.5 * (4.0 / 3.0) * m * l**2 * phi_dot**2
    )
    return float(kinetic + m * params.gravity * l * math.cos(phi))


# ---------------------------------------------------------------- reacher


def _reacher_mass_matrix(q2, params: ReacherParams):
    l1, l2 = params.link_lengths
    c2 = np.cos(q2)
    m11 = 2.0 * l1**2 + l2**2 + 2.0 * l1 * l2 * c2
    m12 = l2**2 + l1 * l2 * c2
    m22 = np.full_like(c2, l2**2)
    return m11, m12, m22


def reacher_derivatives(arm: np.ndarray, torque: np.ndarray, params: ReacherParams) -> np.ndarray:
    """Two unit point masses at the link tips, viscous joint damping, no gravity."""
    q2, dq1, dq2 = arm[..., 1], arm[..., 2], arm[..., 3]
    l1, l2 = params.link_lengths
    m11, m12, m22 = _reacher_mass_matrix(q2, params)
    h = l1 * l2 * np.sin(q2)
    rhs1 = torque[..., 0] + h * dq2 * (2.0 * dq1 + dq2) - params.damping * dq1
    rhs2 = torque[..., 1] - h * dq1**2 - params.damping * dq2
    det = m11 * m22 - m12 * m12
    acc1 = (m22 * rhs1 - m12 * rhs2) / det
    acc2 = (m11 * rhs2 - m12 * rhs1) / det
    return np.stack([dq1, dq2, acc1, acc2], axis=-1)


def reacher_integrate(state: np.ndarray, action, params: ReacherParams) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    torque = np.clip(np.asarray(action, dtype=np.float64), -params.torque_limit, params.torque_limit)
    arm = rk4(lambda y, u: reacher_derivatives(y, u, params), state[..., :4], torque, params.dt)
    return np.concatenate([arm, state[..., 4:6]], axis=-1)


def reacher_step(state, action, params: ReacherParams) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    _check_finite(state)
    if state.shape != (6,):
        raise InvalidArgumentError(f"reacher state must have 6 entries, got shape {state.shape}")
    nxt = reacher_integrate(state, np.asarray(action, dtype=np.float64).reshape(2), params)
    _check_finite(nxt)
    return nxt


def reacher_effector(state, params: ReacherParams) -> Tuple[np.ndarray, np.ndarray]:
    state = np.asarray(state, dtype=np.float64)
    q1, q2 = state[..., 0], state[..., 1]
    l1, l2 = params.link_lengths
    return l1 * np.cos(q1) + l2 * np.cos(q1 + q2), l1 * np.sin(q1) + l2 * np.sin(q1 + q2)


def reacher_kinetic_energy(state, params: ReacherParams) -> float:
    m11, m12, m22 = _reacher_mass_matrix(np.asarray(state[1]), params)
    dq1, dq2 = state[2], state[3]
    return float(0.5 * (m11 * dq1**2 + 2.0 * m12 * dq1 * dq2 + m22 * dq2**2))


def reacher_reward(state, action, params: ReacherParams):
    ex, ey = reacher_effector(state, params)
    state = np.asarray(state, dtype=np.float64)
    dist = np.hypot(ex - state[..., 4], ey - state[..., 5])
    a = np.asarray(action, dtype=np.float64)
    return -dist - params.action_cost_weight * np.sum(a * a, axis=-1)


def sample_reacher_target(params: ReacherParams, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    mean = np.asarray(params.target_mean, dtype=np.float64)
    sd = np.sqrt(np.asarray(params.target_cov_diag, dtype=np.float64))
    for _ in range(max_tries):
        target = mean + sd * rng.standard_normal(2)
        if np.hypot(*target) <= params.reach:
            return target
    raise ConfigError(f"no reachable target after {max_tries} draws; the target distribution is out of reach")


# ---------------------------------------------------------------- half-cheetah


def cheetah_shaped_reward(next_state, action) -> Tuple[float, float]:
    """Risk-sensitive running reward; returns ``(shaped, raw)``.

    shaped = v - floor(|back angle| / (pi/9)) - 0.1 * sum(a^2);  raw drops the floor term.
    """
    s = np.asarray(next_state, dtype=np.float64).reshape(-1)
    if s.size < 3:
        raise InvalidArgumentError("the half-cheetah state needs at least 3 entries")
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    control = 0.1 * float(np.sum(a * a))
    penalty = math.floor(abs(float(s[2])) / (math.pi / 9.0))
    # evaluated left to right as written so the hand-derived cases are exact
    return float(s[0]) - penalty - control, float(s[0]) - control


# ---------------------------------------------------------------- registry


@dataclass(frozen=True)
class Environment:
    """Bundles dimensions, bounds, dynamics and reward for one task."""

    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    params: object
    step: Callable = field(repr=False)
    batch_step: Callable = field(repr=False)
    reward: Callable = field(repr=False)
    reset: Callable = field(repr=False)


def env_reset(env, rng: np.random.Generator) -> np.ndarray:
    params = env.params if isinstance(env, Environment) else env
    if isinstance(params, CartpoleParams):
        noise = 0.01 * rng.standard_normal(4)
        if params.start_mode is StartMode.AT_END:
            x = -params.rail_half_width + 0.01
        else:
            x = noise[0]
        return np.array([x, noise[1], math.pi + noise[2], noise[3]])
    if isinstance(params, ReacherParams):
        angles = 0.1 * rng.standard_normal(2)
        target = sample_reacher_target(params, rng)
        return np.concatenate([angles, np.zeros(2), target])
    raise InvalidArgumentError(f"cannot reset environment with parameters {params!r}")


ENV_NAMES = ("cartpole-modified", "cartpole-center", "reacher")


def make_env(name: str, **overrides) -> Environment:
    if name in ("cartpole-modified", "cartpole-center"):
        params = CartpoleParams.modified(**overrides) if name == "cartpole-modified" else CartpoleParams.centered(**overrides)
        F = params.force_limit
        return Environment(
            name, 4, 1, np.array([-F]), np.array([F]), params,
            step=lambda s, a: cartpole_step(s, a, params),
            batch_step=lambda s, a: cartpole_integrate(s, a, params),
            reward=lambda s, a: cartpole_reward(s, a, params),
            reset=lambda rng: env_reset(params, rng),
        )
    if name == "reacher":
        params = ReacherParams(**overrides)
        T = params.torque_limit
        return Environment(
            name, 6, 2, np.array([-T, -T]), np.array([T, T]), params,
            step=lambda s, a: reacher_step(s, a, params),
            batch_step=lambda s, a: reacher_integrate(s, a, params),
            reward=lambda s, a: reacher_reward(s, a, params),
            reset=lambda rng: env_reset(params, rng),
        )
    raise ConfigError(f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)}")
