"""One episode of the remote control loop, fully recorded.

Per step: observe -> observer picks a compression level (or a fixed-level
stub does) -> encode/transmit -> robot decodes and acts -> plant advances ->
the robot's action feeds back to the observer for the next decision. The
age of information (AoI) counts steps since the last transmission and is 0
immediately after one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import codec, env, neural
from .agents import (
    ObserverPolicy,
    RobotPolicy,
    SemanticRegressor,
    build_observer_inputs,
    build_robot_inputs,
    observation_norm_vec,
    observer_input_dim,
    observer_reward,
    reconstruct_obs_norm,
    robot_input_dim,
)


def update_aoi(aoi: int, transmitted: bool) -> int:
    """0 right after a transmission, otherwise one more step of staleness."""
    if aoi < 0:
        raise ValueError("AoI cannot be negative")
    return 0 if transmitted else aoi + 1


@dataclass
class FixedLevelObserver:
    """Static baseline: always the same level (0 transmits nothing)."""

    level: int


@dataclass
class EpisodeTrace:
    """Per-step record of one episode; all arrays share the same length."""

    states: np.ndarray  # (T, 4) true state when the decision was made
    obs_prev: np.ndarray  # (T, 4) noisy snapshots (vector mode)
    obs_curr: np.ndarray
    features: np.ndarray  # (T, F)
    levels: np.ndarray  # (T,) chosen level, 0 = silence
    indices: np.ndarray  # (T, F) codeword indices, -1 where silent
    ell: np.ndarray  # (T,) payload bytes
    actions: np.ndarray  # (T,) robot action
    action_probs: np.ndarray  # (T, 2)
    env_rewards: np.ndarray  # (T,)
    observer_rewards: np.ndarray  # (T,)
    aoi: np.ndarray  # (T,) age of information before the decision
    values: np.ndarray  # (T,) robot critic after consuming the message
    values_null: np.ndarray  # (T,) critic after the counterfactual null token
    psnr_db: np.ndarray  # (T,) reconstruction PSNR of the held estimate
    state_mse: np.ndarray  # (T,) physical-units estimate MSE (NaN without a regressor)
    done: bool

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def robot_entropy_bits(self) -> np.ndarray:
        p = np.clip(self.action_probs, 1e-300, 1.0)
        return -(self.action_probs * np.log2(p)).sum(axis=1)


def run_episode(
    env_cfg: env.EnvConfig,
    ensemble: codec.CodebookEnsemble,
    observer: ObserverPolicy | FixedLevelObserver,
    robot: RobotPolicy,
    rng: np.random.Generator,
    regressor: SemanticRegressor | None = None,
    beta: float = 0.0,
    reward_level: str = "C",
    greedy_robot: bool = True,
    greedy_observer: bool = False,
    projection: codec.PatchProjection | None = None,
) -> EpisodeTrace:
    """Run one episode to termination or the horizon and record every step.

    The robot reads nothing but messages (and silence); observer and robot
    recurrent states persist across the episode. The same seeds give
    bit-identical traces.
    """
    n_features = ensemble.n_features
    n_levels = ensemble.max_level
    if robot.spec.input_dim != robot_input_dim(n_features, n_levels):
        raise ValueError("robot input layout does not match the codebook ensemble")
    dynamic = isinstance(observer, ObserverPolicy)
    if dynamic and observer.spec.input_dim != observer_input_dim(n_features, n_levels):
        raise ValueError("observer input layout does not match the codebook ensemble")
    if not dynamic and not 0 <= observer.level <= n_levels:
        raise ValueError("fixed level out of range")
    if reward_level == "B" and regressor is None:
        raise ValueError("Level B observer reward needs a regressor")
    pixel = env_cfg.obs_mode == env.PIXEL_MODE
    if pixel and projection is None:
        raise ValueError("pixel-mode episodes need the trained patch projection")

    robot_runner = neural.Runner(robot.params, robot.spec)
    robot_state = neural.zero_state(robot.spec)
    if dynamic:
        obs_runner = neural.Runner(observer.params, observer.spec)
        obs_state = neural.zero_state(observer.spec)
    if regressor is not None:
        reg_runner = neural.Runner(regressor.params, regressor.spec)
        reg_state = neural.zero_state(regressor.spec)

    scales = env_cfg.scales
    state = env.reset(rng, env_cfg)
    prev_state = state
    held = np.zeros(n_features)
    aoi = 0
    prev_robot_action = -1
    prev_level = -1

    rec: dict[str, list] = {k: [] for k in (
        "states", "obs_prev", "obs_curr", "features", "levels", "indices", "ell",
        "actions", "action_probs", "env_rewards", "observer_rewards", "aoi",
        "values", "values_null", "psnr_db", "state_mse",
    )}
    done = False
    for t in range(env_cfg.horizon):
        obs = env.observe(prev_state, state, env_cfg, rng)
        feats = codec.extract_features(obs, scales=scales, projection=projection)
        if pixel:
            pooled_pair = codec.pool_frame_pair(obs, projection.pool)

        if dynamic:
            x_obs = build_observer_inputs(
                feats[None, :],
                np.array([prev_robot_action]),
                np.array([prev_level]),
                np.array([float(aoi)]),
                n_levels,
                observer.use_aoi_input,
            )[0]
            logits, _, obs_state = obs_runner.step(x_obs, obs_state)
            level = neural.sample_categorical(logits, rng=rng, greedy=greedy_observer)
        else:
            level = observer.level

        if level != codec.NULL_LEVEL:
            book = ensemble.book(level)
            idx = codec.encode_indices(feats[None, :], book)[0]
            deq = codec.decode_indices(idx[None, :], book)[0]
            held = deq
            ell = codec.message_length_bytes(codec.Message(level, idx), n_features)
        else:
            idx = np.full(n_features, -1, dtype=np.int64)
            deq = np.zeros(n_features)
            ell = 0.0

        x_rob = build_robot_inputs(deq[None, :], np.array([level]), n_levels)[0]
        prior_robot_state = robot_state
        logits_r, value, robot_state = robot_runner.step(x_rob, prior_robot_state)
        probs = neural.softmax(logits_r)
        action = neural.sample_categorical(logits_r, rng=rng, greedy=greedy_robot)
        if level != codec.NULL_LEVEL:
            x_null = build_robot_inputs(
                np.zeros((1, n_features)), np.array([codec.NULL_LEVEL]), n_levels
            )[0]
            _, value_null, _ = robot_runner.step(x_null, prior_robot_state)
        else:
            value_null = value

        if regressor is not None:
            pred, _, reg_state = reg_runner.step(x_rob, reg_state)
            s_obs = state.as_array() if pixel else feats[:4] * scales
            s_rob = pred * scales
            state_mse = codec.distortion_mse(s_obs, s_rob)
        else:
            state_mse = math.nan

        if pixel:
            obs_norm = pooled_pair
            obs_hat = projection.reconstruct(held)
            psnr = codec.distortion_psnr(obs_norm, obs_hat, max_value=1.0)
        else:
            obs_norm = observation_norm_vec(obs, scales)
            obs_hat = reconstruct_obs_norm(held)
            psnr = codec.distortion_psnr(obs_norm, obs_hat, max_value=2.0)

        next_state, env_rew, done = env.step(state, action, env_cfg, t=t)

        if reward_level == "A":
            obs_rew = psnr - beta * ell
        elif reward_level == "B":
            obs_rew = observer_reward("B", beta, ell, state_obs=s_obs, state_rob=s_rob)
        else:
            obs_rew = observer_reward("C", beta, ell, env_reward=env_rew)

        rec["states"].append(state.as_array())
        if pixel:
            rec["obs_prev"].append(np.full(4, np.nan))
            rec["obs_curr"].append(np.full(4, np.nan))
        else:
            rec["obs_prev"].append(np.asarray(obs.previous, dtype=np.float64))
            rec["obs_curr"].append(np.asarray(obs.current, dtype=np.float64))
        rec["features"].append(feats)
        rec["levels"].append(level)
        rec["indices"].append(idx)
        rec["ell"].append(ell)
        rec["actions"].append(action)
        rec["action_probs"].append(probs)
        rec["env_rewards"].append(env_rew)
        rec["observer_rewards"].append(obs_rew)
        rec["aoi"].append(aoi)
        rec["values"].append(value)
        rec["values_null"].append(value_null)
        rec["psnr_db"].append(psnr)
        rec["state_mse"].append(state_mse)

        aoi = update_aoi(aoi, level != codec.NULL_LEVEL)
        prev_robot_action = action
        prev_level = level
        prev_state = state
        state = next_state
        if done:
            break

    return EpisodeTrace(
        states=np.array(rec["states"]),
        obs_prev=np.array(rec["obs_prev"]),
        obs_curr=np.array(rec["obs_curr"]),
        features=np.array(rec["features"]),
        levels=np.array(rec["levels"], dtype=np.int64),
        indices=np.array(rec["indices"], dtype=np.int64),
        ell=np.array(rec["ell"]),
        actions=np.array(rec["actions"], dtype=np.int64),
        action_probs=np.array(rec["action_probs"]),
        env_rewards=np.array(rec["env_rewards"]),
        observer_rewards=np.array(rec["observer_rewards"]),
        aoi=np.array(rec["aoi"], dtype=np.int64),
        values=np.array(rec["values"]),
        values_null=np.array(rec["values_null"]),
        psnr_db=np.array(rec["psnr_db"]),
        state_mse=np.array(rec["state_mse"]),
        done=done,
    )


# ---------------------------------------------------------------------------
# Trace serialization

TRACE_COLUMNS = [
    "episode", "t", "x", "x_dot", "psi", "psi_dot", "level", "ell",
    "action", "reward", "aoi", "entropy", "value",
]


def write_traces(traces: list[EpisodeTrace], path) -> None:
    """One CSV row per step in the documented column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for ep, trace in enumerate(traces):
            entropy = trace.robot_entropy_bits
            for t in range(len(trace)):
                writer.writerow(
                    [
                        ep,
                        t,
                        repr(float(trace.states[t, 0])),
                        repr(float(trace.states[t, 1])),
                        repr(float(trace.states[t, 2])),
                        repr(float(trace.states[t, 3])),
                        int(trace.levels[t]),
                        repr(float(trace.ell[t])),
                        int(trace.actions[t]),
                        repr(float(trace.env_rewards[t])),
                        int(trace.aoi[t]),
                        repr(float(entropy[t])),
                        repr(float(trace.values[t])),
                    ]
                )


def read_trace_table(path) -> dict[str, np.ndarray]:
    """Columns of a trace CSV as arrays (floats except the integer columns)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace columns {header}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty trace file")
    cols = np.array(rows, dtype=np.float64).T
    table = dict(zip(TRACE_COLUMNS, cols))
    for name in ("episode", "t", "level", "action", "aoi"):
        table[name] = table[name].astype(np.int64)
    return table
