"""CartPole plant: dynamics, reward, termination, and observation generation.

The system state is the four physical quantities (x, x_dot, psi, psi_dot).
Dynamics follow the standard inverted-pendulum equations with explicit Euler
integration; an episode is live while |x| <= x_max and |psi| <= psi_max.
Observations are pairs of consecutive snapshots, either noisy state vectors
(default) or binary rendered frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VECTOR_MODE = "vector"
PIXEL_MODE = "pixel"


@dataclass(frozen=True)
class SystemState:
    """Cart position (m), cart velocity (m/s), pole angle (rad), pole angular velocity (rad/s)."""

    x: float
    x_dot: float
    psi: float
    psi_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.psi, self.psi_dot], dtype=np.float64)

    def negate(self) -> "SystemState":
        return SystemState(-self.x, -self.x_dot, -self.psi, -self.psi_dot)


@dataclass(frozen=True)
class EnvConfig:
    """Physical constants, termination bounds, horizon, and observation settings.

    Termination bounds are x_max = 4.8 m and psi_max = 2*pi/15 rad (24 deg),
    wider than the common Gym defaults. `scales` holds the per-dimension
    normalization constants used for observation noise and feature extraction.
    """

    x_max: float = 4.8
    psi_max: float = 2.0 * math.pi / 15.0
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    force_magnitude: float = 10.0
    time_step: float = 0.02
    horizon: int = 500
    obs_mode: str = VECTOR_MODE
    obs_noise_sigma: float = 0.01
    x_dot_scale: float = 3.0
    psi_dot_scale: float = 3.0
    frame_height: int = 40
    frame_width: int = 80
    init_range: float = 0.05

    def __post_init__(self):
        if not self.x_max > 0:
            raise ValueError("x_max must be positive")
        if not 0 < self.psi_max < math.pi / 2:
            raise ValueError("psi_max must lie in (0, pi/2)")
        if not self.time_step > 0:
            raise ValueError("time_step must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.obs_mode not in (VECTOR_MODE, PIXEL_MODE):
            raise ValueError(f"unknown obs_mode {self.obs_mode!r}")

    @property
    def scales(self) -> np.ndarray:
        """Normalization constants for (x, x_dot, psi, psi_dot)."""
        return np.array(
            [self.x_max, self.x_dot_scale, self.psi_max, self.psi_dot_scale],
            dtype=np.float64,
        )


@dataclass(frozen=True, eq=False)
class Observation:
    """Two consecutive snapshots: noisy 4-vectors (vector mode) or binary frames."""

    previous: np.ndarray
    current: np.ndarray
    mode: str = VECTOR_MODE

    def __post_init__(self):
        if self.previous.shape != self.current.shape:
            raise ValueError("snapshots must share the same shape")


def is_live(state: SystemState, cfg: EnvConfig) -> bool:
    return abs(state.x) <= cfg.x_max and abs(state.psi) <= cfg.psi_max


def reset(rng: np.random.Generator, cfg: EnvConfig = EnvConfig()) -> SystemState:
    """Initial state with each field drawn i.i.d. uniform in +-init_range."""
    vals = rng.uniform(-cfg.init_range, cfg.init_range, size=4)
    return SystemState(*[float(v) for v in vals])


LEFT = 0
RIGHT = 1


def step(
    state: SystemState,
    action: int,
    cfg: EnvConfig = EnvConfig(),
    t: int | None = None,
) -> tuple[SystemState, float, bool]:
    """Advance one Euler step; returns (next state, reward(next state), done).

    `done` is true when the next state leaves the live region, or when `t`
    (the 0-based index of this step) is given and the horizon is reached.
    Stepping a non-live state is a contract violation.
    """
    if action not in (LEFT, RIGHT):
        raise ValueError(f"action must be {LEFT} or {RIGHT}, got {action!r}")
    if not is_live(state, cfg):
        raise ValueError("cannot step a non-live state")

    force = cfg.force_magnitude if action == RIGHT else -cfg.force_magnitude
    total_mass = cfg.cart_mass + cfg.pole_mass
    polemass_length = cfg.pole_mass * cfg.pole_half_length
    cos_psi = math.cos(state.psi)
    sin_psi = math.sin(state.psi)

    temp = (force + polemass_length * state.psi_dot**2 * sin_psi) / total_mass
    psi_acc = (cfg.gravity * sin_psi - cos_psi * temp) / (
        cfg.pole_half_length * (4.0 / 3.0 - cfg.pole_mass * cos_psi**2 / total_mass)
    )
    x_acc = temp - polemass_length * psi_acc * cos_psi / total_mass

    # Semi-explicit Euler in the Gym ordering: positions use the old velocities.
    nxt = SystemState(
        x=state.x + cfg.time_step * state.x_dot,
        x_dot=state.x_dot + cfg.time_step * x_acc,
        psi=state.psi + cfg.time_step * state.psi_dot,
        psi_dot=state.psi_dot + cfg.time_step * psi_acc,
    )
    done = not is_live(nxt, cfg)
    if t is not None and t + 1 >= cfg.horizon:
        done = True
    return nxt, reward(nxt, cfg), done


def reward(state: SystemState, cfg: EnvConfig = EnvConfig()) -> float:
    """Deterministic reward -|x|/x_max - |psi|/psi_max, in [-2, 0] on live states."""
    return -abs(state.x) / cfg.x_max - abs(state.psi) / cfg.psi_max


def step_batch(
    states: np.ndarray, actions: np.ndarray, cfg: EnvConfig = EnvConfig()
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized `step` over rows of (B, 4) states: (next, rewards, live).

    Same equations and update order as `step`; horizon handling stays with
    the caller. Used by the training loops; tested to match `step` exactly.
    """
    x, x_dot, psi, psi_dot = states[:, 0], states[:, 1], states[:, 2], states[:, 3]
    force = np.where(actions == RIGHT, cfg.force_magnitude, -cfg.force_magnitude)
    total_mass = cfg.cart_mass + cfg.pole_mass
    polemass_length = cfg.pole_mass * cfg.pole_half_length
    cos_psi = np.cos(psi)
    sin_psi = np.sin(psi)
    temp = (force + polemass_length * psi_dot**2 * sin_psi) / total_mass
    psi_acc = (cfg.gravity * sin_psi - cos_psi * temp) / (
        cfg.pole_half_length * (4.0 / 3.0 - cfg.pole_mass * cos_psi**2 / total_mass)
    )
    x_acc = temp - polemass_length * psi_acc * cos_psi / total_mass
    nxt = np.stack(
        [
            x + cfg.time_step * x_dot,
            x_dot + cfg.time_step * x_acc,
            psi + cfg.time_step * psi_dot,
            psi_dot + cfg.time_step * psi_acc,
        ],
        axis=1,
    )
    rewards = -np.abs(nxt[:, 0]) / cfg.x_max - np.abs(nxt[:, 2]) / cfg.psi_max
    live = (np.abs(nxt[:, 0]) <= cfg.x_max) & (np.abs(nxt[:, 2]) <= cfg.psi_max)
    return nxt, rewards, live


def normalize_state(state: SystemState, cfg: EnvConfig) -> np.ndarray:
    return state.as_array() / cfg.scales


def observe(
    prev: SystemState,
    curr: SystemState,
    cfg: EnvConfig = EnvConfig(),
    rng: np.random.Generator | None = None,
) -> Observation:
    """Observation of two consecutive states.

    Vector mode adds i.i.d. Gaussian noise with std obs_noise_sigma per
    normalized dimension (i.e. sigma * scale in raw units). Pixel mode
    renders binary frames.
    """
    if cfg.obs_mode == VECTOR_MODE:
        sigma_raw = cfg.obs_noise_sigma * cfg.scales
        prev_snap = prev.as_array()
        curr_snap = curr.as_array()
        if cfg.obs_noise_sigma > 0:
            if rng is None:
                raise ValueError("rng required when obs_noise_sigma > 0")
            prev_snap = prev_snap + rng.normal(0.0, 1.0, size=4) * sigma_raw
            curr_snap = curr_snap + rng.normal(0.0, 1.0, size=4) * sigma_raw
        return Observation(previous=prev_snap, current=curr_snap, mode=VECTOR_MODE)
    return Observation(
        previous=render_frame(prev, cfg),
        current=render_frame(curr, cfg),
        mode=PIXEL_MODE,
    )


def render_frame(state: SystemState, cfg: EnvConfig) -> np.ndarray:
    """Binary rendering of the cart and pole at the configured resolution.

    World x in [-x_max, x_max] maps to columns; the cart sits on a ground row
    near the bottom and the pole extends from the cart top at angle psi
    (psi = 0 is straight up).
    """
    h, w = cfg.frame_height, cfg.frame_width
    frame = np.zeros((h, w), dtype=np.uint8)

    def col_of(world_x: float) -> int:
        frac = (world_x + cfg.x_max) / (2.0 * cfg.x_max)
        return int(np.clip(round(frac * (w - 1)), 0, w - 1))

    cart_row = h - 4
    cart_half_w = max(1, w // 20)
    cx = col_of(state.x)
    frame[cart_row : cart_row + 3, max(0, cx - cart_half_w) : min(w, cx + cart_half_w + 1)] = 1

    pole_len = int(0.7 * h)
    for i in range(pole_len):
        frac = i / max(1, pole_len - 1)
        r = cart_row - 1 - int(round(frac * pole_len * math.cos(state.psi)))
        c = cx + int(round(frac * pole_len * math.sin(state.psi)))
        if 0 <= r < h and 0 <= c < w:
            frame[r, c] = 1
    return frame
