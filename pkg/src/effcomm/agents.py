"""The three learned components and their training loops.

* Robot: recurrent actor-critic controlling the cart from received messages,
  trained with A2C on the finest quantization level only. It consumes
  dequantized feature values plus a level one-hot and a no-transmission
  flag, so one trained robot serves every compression level.
* Semantic regressor: recurrent network mapping the robot's input stream to
  an estimate of the four normalized state coordinates, trained supervised
  on greedy-robot traces.
* Observer: recurrent actor-critic choosing the compression level (or
  silence) each step, trained with A2C against one of the three reward
  definitions: technical (observation PSNR), semantic (state-estimate MSE),
  or effective (the control reward itself), each minus a per-byte cost.

The training loops run many environment slots in lockstep and update with
truncated BPTT over fixed windows; every random draw comes from named
substreams of the config seed, so runs with equal seeds produce identical
checkpoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import codec, env, neural
from .seeding import substream

LEVEL_A = "A"
LEVEL_B = "B"
LEVEL_C = "C"

AOI_INPUT_SCALE = 10.0


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the A2C and regressor training loops."""

    gamma: float = 0.95
    lr_a2c: float = 1e-4
    lr_regressor: float = 1e-4
    batch_size: int = 256
    robot_episodes: int = 20_000
    observer_episodes: int = 100_000
    regressor_episodes: int = 2_000
    regressor_epochs: int = 4
    beta: float = 0.1
    level: str = LEVEL_C
    entropy_coef: float = 0.01
    bptt_window: int = 32
    grad_clip: float = 5.0
    n_envs: int = 16
    use_aoi_input: bool = True
    reward_scale: float | None = None
    select_every: int = 500
    select_episodes: int = 24
    policy_lr_mult: float = 1.0
    lr_decay: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")
        if self.level not in (LEVEL_A, LEVEL_B, LEVEL_C):
            raise ValueError("level must be A, B, or C")
        if self.bptt_window < 1 or self.n_envs < 1:
            raise ValueError("bptt_window and n_envs must be >= 1")

    def scale_for(self, level: str) -> float:
        """Training reward scale: keeps critic targets within an Adam-reachable
        range for each reward family (PSNR rewards are two orders larger than
        control rewards). Explicit reward_scale overrides."""
        if self.reward_scale is not None:
            return self.reward_scale
        return {LEVEL_A: 0.003, LEVEL_B: 1.0, LEVEL_C: 0.1}[level]


# ---------------------------------------------------------------------------
# Policy containers and input layouts


@dataclass
class RobotPolicy:
    """Actor-critic over {Left, Right}; input = dequantized features + level one-hot + no-tx flag."""

    spec: neural.NetworkSpec
    params: np.ndarray
    n_features: int
    n_levels: int


@dataclass
class ObserverPolicy:
    """Actor-critic over {null, 1..V}; input = raw features + feedback one-hots + AoI scalar."""

    spec: neural.NetworkSpec
    params: np.ndarray
    n_features: int
    n_levels: int
    use_aoi_input: bool


@dataclass
class SemanticRegressor:
    """Recurrent regressor from the robot's input stream to the normalized state."""

    spec: neural.NetworkSpec
    params: np.ndarray
    n_features: int
    n_levels: int


def robot_input_dim(n_features: int, n_levels: int) -> int:
    return n_features + (n_levels + 1) + 1


def observer_input_dim(n_features: int, n_levels: int) -> int:
    return n_features + 2 + (n_levels + 1) + 1


def new_robot(n_features: int, n_levels: int, rng: np.random.Generator) -> RobotPolicy:
    spec = neural.NetworkSpec(
        input_dim=robot_input_dim(n_features, n_levels), policy_outputs=2
    )
    return RobotPolicy(spec, neural.init_params(spec, rng), n_features, n_levels)


def new_observer(
    n_features: int, n_levels: int, rng: np.random.Generator, use_aoi_input: bool = True
) -> ObserverPolicy:
    spec = neural.NetworkSpec(
        input_dim=observer_input_dim(n_features, n_levels),
        policy_outputs=n_levels + 1,
    )
    return ObserverPolicy(spec, neural.init_params(spec, rng), n_features, n_levels, use_aoi_input)


def new_regressor(n_features: int, n_levels: int, rng: np.random.Generator) -> SemanticRegressor:
    spec = neural.NetworkSpec(
        input_dim=robot_input_dim(n_features, n_levels),
        policy_outputs=4,
        has_value_head=False,
    )
    return SemanticRegressor(spec, neural.init_params(spec, rng), n_features, n_levels)


def build_robot_inputs(
    deq_feats: np.ndarray, levels: np.ndarray, n_levels: int
) -> np.ndarray:
    """Batched robot input rows: (B, F) dequantized features (zeros where silent),
    level one-hots over {0..V}, and the no-transmission flag."""
    batch, n_features = deq_feats.shape
    out = np.zeros((batch, robot_input_dim(n_features, n_levels)))
    out[:, :n_features] = deq_feats
    out[np.arange(batch), n_features + levels] = 1.0
    out[:, -1] = (levels == codec.NULL_LEVEL).astype(np.float64)
    return out


def build_observer_inputs(
    feats: np.ndarray,
    prev_robot_action: np.ndarray,
    prev_level: np.ndarray,
    aoi: np.ndarray,
    n_levels: int,
    use_aoi_input: bool = True,
) -> np.ndarray:
    """Batched observer input rows; action feedback of -1 encodes "no previous step"."""
    batch, n_features = feats.shape
    out = np.zeros((batch, observer_input_dim(n_features, n_levels)))
    out[:, :n_features] = feats
    has_fb = prev_robot_action >= 0
    out[np.nonzero(has_fb)[0], n_features + prev_robot_action[has_fb]] = 1.0
    has_own = prev_level >= 0
    out[np.nonzero(has_own)[0], n_features + 2 + prev_level[has_own]] = 1.0
    if use_aoi_input:
        out[:, -1] = np.minimum(aoi, AOI_INPUT_SCALE) / AOI_INPUT_SCALE
    return out


def reconstruct_obs_norm(held_feats: np.ndarray) -> np.ndarray:
    """Robot-side normalized observation estimate from the held feature vector.

    Features are (current, current - previous), so the previous snapshot is
    recovered by subtraction. Rows: (..., 8) -> (..., 8) as (prev, curr).
    """
    n = held_feats.shape[-1] // 2
    curr = held_feats[..., :n]
    prev = curr - held_feats[..., n:]
    return np.concatenate([prev, curr], axis=-1)


def observation_norm_vec(obs: env.Observation, scales: np.ndarray) -> np.ndarray:
    """True normalized observation as one (8,) vector (prev, curr)."""
    return np.concatenate([obs.previous / scales, obs.current / scales])


# ---------------------------------------------------------------------------
# Acting and rewards


def robot_act(
    policy: RobotPolicy,
    msg: codec.Message | None,
    ensemble: codec.CodebookEnsemble,
    state: neural.RecurrentState,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
) -> tuple[int, neural.RecurrentState, np.ndarray, float]:
    """Advance the robot one step on a message (None or the null message = silence).

    Returns (action, new recurrent state, action probabilities, value estimate).
    """
    if msg is None or msg.level == codec.NULL_LEVEL:
        deq = np.zeros(policy.n_features)
        level = codec.NULL_LEVEL
    else:
        deq = codec.decode(msg, ensemble)
        level = msg.level
    x = build_robot_inputs(deq[None, :], np.array([level]), policy.n_levels)[0]
    runner = neural.Runner(policy.params, policy.spec)
    logits, value, new_state = runner.step(x, state)
    probs = neural.softmax(logits)
    action = neural.sample_categorical(logits, rng=rng, greedy=greedy)
    return action, new_state, probs, value


def observer_reward(
    level: str,
    beta: float,
    ell_bytes: float,
    obs_norm: np.ndarray | None = None,
    obs_hat_norm: np.ndarray | None = None,
    state_obs: np.ndarray | None = None,
    state_rob: np.ndarray | None = None,
    env_reward: float | None = None,
) -> float:
    """Per-step observer reward for the configured communication problem.

    Level A: +PSNR(observation, reconstruction) - beta * bytes.
    Level B: -MSE(observer state estimate, robot state estimate) - beta * bytes.
    Level C: control reward - beta * bytes.
    """
    cost = beta * ell_bytes
    if level == LEVEL_A:
        if obs_norm is None or obs_hat_norm is None:
            raise ValueError("Level A reward needs the observation and its reconstruction")
        return codec.distortion_psnr(obs_norm, obs_hat_norm, max_value=2.0) - cost
    if level == LEVEL_B:
        if state_obs is None or state_rob is None:
            raise ValueError("Level B reward needs both state estimates")
        return -codec.distortion_mse(state_obs, state_rob) - cost
    if level == LEVEL_C:
        if env_reward is None:
            raise ValueError("Level C reward needs the control reward")
        return env_reward - cost
    raise ValueError(f"unknown level {level!r}")


def estimate_voi(trace, t: int) -> float:
    """Value of the message at step t: critic after the message minus critic
    after the counterfactual null token, both from the same prior state.

    Zero by construction at silent steps.
    """
    return float(trace.values[t] - trace.values_null[t])


# ---------------------------------------------------------------------------
# Vectorized rollout state shared by the trainers


class _VecSlots:
    """B environment slots stepped in lockstep, with per-component recurrent
    states, AoI bookkeeping, feedback memory, and the robot-side held features.

    In pixel mode each observation renders the current frame, pools it, and
    projects the pooled frame pair through the trained projection; the pooled
    previous frame is cached so only one frame is rendered per step.
    """

    def __init__(self, env_cfg: env.EnvConfig, ensemble: codec.CodebookEnsemble,
                 batch: int, env_rng: np.random.Generator,
                 projection: codec.PatchProjection | None = None):
        self.cfg = env_cfg
        self.ensemble = ensemble
        self.batch = batch
        self.env_rng = env_rng
        self.scales = env_cfg.scales
        self.pixel = env_cfg.obs_mode == env.PIXEL_MODE
        self.projection = projection
        if self.pixel and projection is None:
            raise ValueError("pixel-mode rollouts need the trained patch projection")
        self.states = np.empty((batch, 4))
        self.prev_states = np.empty((batch, 4))
        self.t_step = np.zeros(batch, dtype=np.int64)
        self.aoi = np.zeros(batch, dtype=np.int64)
        self.prev_robot_action = np.full(batch, -1, dtype=np.int64)
        self.prev_level = np.full(batch, -1, dtype=np.int64)
        self.held = np.zeros((batch, ensemble.n_features))
        self.ep_return = np.zeros(batch)
        self.ep_len = np.zeros(batch, dtype=np.int64)
        self.ep_bytes = np.zeros(batch)
        self.ep_tx = np.zeros(batch, dtype=np.int64)
        self.ep_obs_return = np.zeros(batch)
        if self.pixel:
            patch_dim = self.projection.mean.shape[0] // 2
            self._pooled_curr = np.zeros((batch, patch_dim))
        for i in range(batch):
            self._reset_slot(i)

    def _pool_state(self, state_row: np.ndarray) -> np.ndarray:
        frame = env.render_frame(env.SystemState(*state_row), self.cfg)
        return codec._pool(frame, self.projection.pool)

    def _reset_slot(self, i: int) -> None:
        self.states[i] = self.env_rng.uniform(-self.cfg.init_range, self.cfg.init_range, size=4)
        self.prev_states[i] = self.states[i]
        self.t_step[i] = 0
        self.aoi[i] = 0
        self.prev_robot_action[i] = -1
        self.prev_level[i] = -1
        self.held[i] = 0.0
        self.ep_return[i] = 0.0
        self.ep_len[i] = 0
        self.ep_bytes[i] = 0.0
        self.ep_tx[i] = 0
        self.ep_obs_return[i] = 0.0
        if self.pixel:
            self._pooled_curr[i] = self._pool_state(self.states[i])

    def observe_features(self, rows: np.ndarray | None = None) -> np.ndarray:
        """Per-slot features of the (previous, current) observation pair.

        Vector mode adds fresh noise per call; pixel mode renders the current
        frame and reuses the cached pooled previous frame. Passing `rows`
        computes a subset without touching the pixel cache (terminal peeks).
        """
        if not self.pixel:
            sigma = self.cfg.obs_noise_sigma
            prev = self.prev_states if rows is None else self.prev_states[rows]
            curr = self.states if rows is None else self.states[rows]
            prev_n = prev / self.scales
            curr_n = curr / self.scales
            if sigma > 0:
                prev_n = prev_n + self.env_rng.normal(0.0, sigma, size=prev_n.shape)
                curr_n = curr_n + self.env_rng.normal(0.0, sigma, size=curr_n.shape)
            return np.concatenate([curr_n, curr_n - prev_n], axis=1)
        idx = range(self.batch) if rows is None else rows
        pooled_curr = np.stack([self._pool_state(self.states[i]) for i in idx])
        pooled_prev = self._pooled_curr if rows is None else self._pooled_curr[rows]
        pair = np.concatenate([pooled_prev, pooled_curr], axis=1)
        feats = self.projection.apply(pair)
        if rows is None:
            self._pooled_curr = pooled_curr
            self._pooled_pair = pair
        return feats

    def transmit(self, levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Encode/decode the current features at per-slot levels.

        Returns (dequantized features with zero rows where silent, bytes).
        Updates the held reconstruction for transmitting slots.
        """
        feats = self._last_feats
        deq = np.zeros_like(feats)
        for v in np.unique(levels):
            if v == codec.NULL_LEVEL:
                continue
            rows = np.nonzero(levels == v)[0]
            book = self.ensemble.book(int(v))
            idx = codec.encode_indices(feats[rows], book)
            deq[rows] = codec.decode_indices(idx, book)
        tx = levels != codec.NULL_LEVEL
        self.held[tx] = deq[tx]
        ell = np.where(tx, levels * self.ensemble.n_features / 8.0, 0.0)
        return deq, ell

    def features_step(self) -> np.ndarray:
        feats = self.observe_features()
        self._last_feats = feats
        return feats

    def env_step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance the plant; returns (rewards, dones, fell). Callers reset done slots."""
        nxt, rewards, live = env.step_batch(self.states, actions, self.cfg)
        self.t_step += 1
        dones = ~live | (self.t_step >= self.cfg.horizon)
        self.prev_states = self.states
        self.states = nxt
        self.ep_return += rewards
        self.ep_len += 1
        return rewards, dones, ~live

    def finish_and_reset(self, dones: np.ndarray) -> list[dict]:
        """Collect episode stats for done slots, then reset them."""
        finished = []
        for i in np.nonzero(dones)[0]:
            finished.append(
                {
                    "return": float(self.ep_return[i]),
                    "length": int(self.ep_len[i]),
                    "bytes": float(self.ep_bytes[i]),
                    "tx_freq": float(self.ep_tx[i] / max(self.ep_len[i], 1)),
                    "mean_ell": float(self.ep_bytes[i] / max(self.ep_len[i], 1)),
                    "obs_return": float(self.ep_obs_return[i]),
                }
            )
            self._reset_slot(int(i))
        return finished


# ---------------------------------------------------------------------------
# Generic A2C driver


def _psnr_rows(a: np.ndarray, b: np.ndarray, max_value: float = 2.0) -> np.ndarray:
    mse = np.maximum(((a - b) ** 2).mean(axis=1), codec.MSE_FLOOR)
    return 10.0 * np.log10(max_value**2 / mse)


class _A2CLoop:
    """Window-collect / BPTT-update loop over lockstep slots.

    The adapter owns everything environment-side; this class owns the trained
    network, advantage computation, and Adam state. TD targets always
    bootstrap a successor value; leaving the viable region is treated as
    absorbing (the final base reward repeats forever), so under an
    all-negative control reward an early crash can never masquerade as an
    escape from the running penalty. Horizon ends are time-limit truncations
    and bootstrap the critic on the actual successor input.
    """

    def __init__(self, spec: neural.NetworkSpec, params: np.ndarray, cfg: TrainConfig,
                 sample_rng: np.random.Generator):
        self.spec = spec
        self.params = params.copy()
        self.cfg = cfg
        self.sample_rng = sample_rng
        self.moments = neural.zero_moments(params.shape[0])
        self.adam_t = 0
        self.state = neural.zero_state(spec, batch=cfg.n_envs)
        self.pending_resets = np.ones(cfg.n_envs, dtype=bool)
        self.last_losses = (math.nan, math.nan, math.nan)
        self._runner = neural.Runner(self.params, self.spec)
        self._best_score = -math.inf
        self._best_params: np.ndarray | None = None
        self._progress = 0.0  # fraction of the episode budget consumed
        self._lr_groups = np.ones_like(self.params)
        if cfg.policy_lr_mult != 1.0:
            v = neural.views(self._lr_groups, spec)
            v["policy_w"][...] = cfg.policy_lr_mult
            v["policy_b"][...] = cfg.policy_lr_mult

    def run(self, adapter, episode_budget: int, log_writer=None, eval_hook=None) -> np.ndarray:
        """Train until the episode budget; return the best evaluated snapshot.

        `eval_hook(params) -> score` is called every cfg.select_every
        completed episodes (and once at the end) on held-out rollouts with
        common random numbers; the highest-scoring parameters win. Without a
        hook the final parameters are returned.
        """
        cfg = self.cfg
        episodes_done = 0
        next_eval = cfg.select_every
        while episodes_done < episode_budget:
            (caches, logits_w, values_w, actions_w, rewards_w, dones_w, vterm_w) = (
                [], [], [], [], [], [], []
            )
            for _ in range(cfg.bptt_window):
                x = adapter.inputs()
                resets = self.pending_resets
                logits, values, self.state, cache = neural.forward_sequence(
                    self.params, self.spec, x[None], self.state, resets[None]
                )
                actions = neural.sample_categorical_batch(
                    logits[0], self.sample_rng.random(cfg.n_envs)
                )
                rewards, dones, finished, term_inputs, term_fixed = adapter.step(actions)
                v_term = np.zeros(cfg.n_envs)
                if dones.any():
                    need_net = dones & np.isnan(term_fixed)
                    if need_net.any():
                        _, v_all, _ = self._runner.step_batch(term_inputs, self.state)
                        v_term[need_net] = v_all[need_net]
                    fixed = dones & ~np.isnan(term_fixed)
                    v_term[fixed] = term_fixed[fixed]
                caches.append(cache)
                logits_w.append(logits[0])
                values_w.append(values[0])
                actions_w.append(actions)
                rewards_w.append(rewards)
                dones_w.append(dones)
                vterm_w.append(v_term)
                self.pending_resets = dones
                for info in finished:
                    episodes_done += 1
                    if log_writer is not None:
                        log_writer(episodes_done, info, self.last_losses)
                if eval_hook is not None and episodes_done >= next_eval:
                    self._consider(eval_hook)
                    next_eval += cfg.select_every
            self._progress = min(episodes_done / episode_budget, 1.0)
            self._update(adapter, caches, logits_w, values_w, actions_w, rewards_w,
                         dones_w, vterm_w)
        if eval_hook is not None:
            self._consider(eval_hook)
        return self._best_params if self._best_params is not None else self.params

    def _consider(self, eval_hook) -> None:
        score = float(eval_hook(self.params))
        if score > self._best_score:
            self._best_score = score
            self._best_params = self.params.copy()

    def _update(self, adapter, caches, logits_w, values_w, actions_w, rewards_w,
                dones_w, vterm_w):
        cfg = self.cfg
        t_len = len(caches)
        logits = np.stack(logits_w)
        values = np.stack(values_w)
        actions = np.stack(actions_w)
        rewards = np.stack(rewards_w)
        dones = np.stack(dones_w)
        v_terms = np.stack(vterm_w)

        x_peek = adapter.inputs()
        peek_state = neural.RecurrentState(h=self.state.h.copy(), c=self.state.c.copy())
        peek_state.h[self.pending_resets] = 0.0
        peek_state.c[self.pending_resets] = 0.0
        _, v_peek, _ = self._runner.step_batch(x_peek, peek_state)
        v_next = np.concatenate([values[1:], v_peek[None]], axis=0)
        v_next = np.where(dones, v_terms, v_next)

        adv = rewards + cfg.gamma * v_next - values
        probs = neural.softmax(logits)
        onehot = np.zeros_like(probs)
        t_idx, b_idx = np.meshgrid(np.arange(t_len), np.arange(cfg.n_envs), indexing="ij")
        onehot[t_idx, b_idx, actions] = 1.0
        ent = neural.categorical_entropy(probs)
        logp = np.log(np.clip(probs, 1e-300, None))

        denom = float(t_len * cfg.n_envs)
        dlogits = (
            adv[..., None] * (probs - onehot)
            + cfg.entropy_coef * probs * (logp + ent[..., None])
        ) / denom
        dvalues = (-2.0 * adv) / denom

        pol_loss = float(-(adv * logp[t_idx, b_idx, actions]).mean())
        val_loss = float((adv**2).mean())
        ent_mean = float(ent.mean())
        if not (math.isfinite(pol_loss) and math.isfinite(val_loss) and math.isfinite(ent_mean)):
            raise RuntimeError("non-finite training loss; diverged")
        self.last_losses = (pol_loss, val_loss, ent_mean)

        cache = _merge_caches(caches)
        grad = neural.backward_sequence(self.params, self.spec, cache, dlogits, dvalues)
        grad = neural.clip_gradient(grad, cfg.grad_clip)
        self.adam_t += 1
        lr = cfg.lr_a2c
        if cfg.lr_decay:  # linear decay to 10% over the episode budget
            lr = lr * (1.0 - 0.9 * self._progress)
        lr_eff = lr * self._lr_groups if cfg.policy_lr_mult != 1.0 else lr
        self.params, self.moments = neural.adam_step(
            self.params, grad, self.moments, lr_eff, self.adam_t
        )
        self._runner = neural.Runner(self.params, self.spec)


def _merge_caches(caches: list[neural.SequenceCache]) -> neural.SequenceCache:
    if len(caches) == 1:
        return caches[0]
    fields = {}
    for name in ("xs", "h_prev", "c_prev", "gates", "c_new", "tanh_c", "h_new", "pre", "u", "resets"):
        fields[name] = np.concatenate([getattr(c, name) for c in caches], axis=0)
    return neural.SequenceCache(**fields)


def _fixed_rollout_score(
    params: np.ndarray,
    spec: neural.NetworkSpec,
    make_adapter,
    cfg: TrainConfig,
    metric: str,
    greedy: bool,
    sample_stream: str,
) -> float:
    """Score a parameter snapshot on freshly seeded held-out rollouts.

    The adapter factory recreates identical evaluation conditions every call
    (common random numbers), so scores of successive snapshots are directly
    comparable. `metric` is the mean episode length or the mean discounted
    return including terminal tails.
    """
    adapter, slots = make_adapter()
    runner = neural.Runner(params, spec)
    state = neural.zero_state(spec, batch=slots.batch)
    sample_rng = substream(cfg.seed, sample_stream)
    disc = np.zeros(slots.batch)
    gpow = np.ones(slots.batch)
    lengths: list[float] = []
    scores: list[float] = []
    while len(lengths) < cfg.select_episodes:
        x = adapter.inputs()
        logits, _, state = runner.step_batch(x, state)
        if greedy:
            actions = np.argmax(logits, axis=1)
        else:
            actions = neural.sample_categorical_batch(logits, sample_rng.random(slots.batch))
        rewards, dones, finished, term_inputs, term_fixed = adapter.step(actions)
        disc += gpow * rewards
        gpow *= cfg.gamma
        if dones.any():
            v_term = np.zeros(slots.batch)
            need_net = dones & np.isnan(term_fixed)
            if need_net.any():
                _, v_all, _ = runner.step_batch(term_inputs, state)
                v_term[need_net] = v_all[need_net]
            fixed = dones & ~np.isnan(term_fixed)
            v_term[fixed] = term_fixed[fixed]
            ep_scores = disc + gpow * v_term
            for rank, i in enumerate(np.nonzero(dones)[0]):
                lengths.append(float(finished[rank]["length"]))
                scores.append(float(ep_scores[i]))
                disc[i] = 0.0
                gpow[i] = 1.0
            state.h[dones] = 0.0
            state.c[dones] = 0.0
    return float(np.mean(lengths if metric == "length" else scores))


# ---------------------------------------------------------------------------
# Robot training


class _RobotAdapter:
    """Slots where every step transmits at the finest level V.

    The next input is precomputed after each plant step, so `inputs()` is
    side-effect free and can back both the bootstrap peek and the next
    forward pass with the same observation.
    """

    def __init__(self, slots: _VecSlots, robot_levels: int, gamma: float,
                 reward_scale: float = 1.0):
        self.slots = slots
        self.n_levels = robot_levels
        self.v_max = slots.ensemble.max_level
        self.gamma = gamma
        self.reward_scale = reward_scale
        self._pending = self._build_input()

    def _build_input(self) -> np.ndarray:
        slots = self.slots
        feats = slots.features_step()
        levels = np.full(slots.batch, self.v_max, dtype=np.int64)
        deq, ell = slots.transmit(levels)
        slots.ep_bytes += ell
        slots.ep_tx += 1
        return build_robot_inputs(deq, levels, self.n_levels)

    def inputs(self) -> np.ndarray:
        return self._pending

    def step(self, actions: np.ndarray):
        slots = self.slots
        rewards, dones, fell = slots.env_step(actions)
        rewards = rewards * self.reward_scale
        term = np.zeros((slots.batch, robot_input_dim(slots.ensemble.n_features, self.n_levels)))
        term_fixed = np.full(slots.batch, np.nan)
        if dones.any():
            # Crash: the fallen state's reward repeats forever (absorbing).
            term_fixed[fell] = rewards[fell] / (1.0 - self.gamma)
            trunc = np.nonzero(dones & ~fell)[0]
            if trunc.size:
                feats = slots.observe_features(trunc)
                book = slots.ensemble.book(self.v_max)
                deq = codec.decode_indices(codec.encode_indices(feats, book), book)
                term[trunc] = build_robot_inputs(
                    deq, np.full(trunc.size, self.v_max, dtype=np.int64), self.n_levels
                )
        finished = slots.finish_and_reset(dones)
        self._pending = self._build_input()
        return rewards, dones, finished, term, term_fixed


def train_robot_a2c(
    env_cfg: env.EnvConfig,
    ensemble: codec.CodebookEnsemble,
    cfg: TrainConfig,
    log_path=None,
    projection: codec.PatchProjection | None = None,
) -> RobotPolicy:
    """A2C training of the robot on v = V messages; deterministic given cfg.seed."""
    robot = new_robot(ensemble.n_features, ensemble.max_level,
                      substream(cfg.seed, "init/robot"))
    if cfg.robot_episodes <= 0:
        return robot
    slots = _VecSlots(env_cfg, ensemble, cfg.n_envs, substream(cfg.seed, "env/robot"),
                      projection)
    adapter = _RobotAdapter(slots, robot.n_levels, cfg.gamma, cfg.scale_for(LEVEL_C))
    loop = _A2CLoop(robot.spec, robot.params, cfg, substream(cfg.seed, "sampling/robot"))

    def make_eval_adapter():
        eval_slots = _VecSlots(env_cfg, ensemble, cfg.n_envs,
                               substream(cfg.seed, "select/env/robot"), projection)
        return _RobotAdapter(eval_slots, robot.n_levels, cfg.gamma,
                             cfg.scale_for(LEVEL_C)), eval_slots

    def eval_hook(params: np.ndarray) -> float:
        return _fixed_rollout_score(params, robot.spec, make_eval_adapter, cfg,
                                    "length", True, "select/sampling/robot")

    with _train_log(log_path) as log_writer:
        robot.params = loop.run(adapter, cfg.robot_episodes, log_writer, eval_hook)
    return robot


# ---------------------------------------------------------------------------
# Observer training


class _ObserverAdapter:
    """Slots where the trained observer picks levels and a frozen robot acts greedily.

    `inputs()` computes the observer's view; `step(levels)` transmits, runs the
    robot and the plant, and returns the per-level observer reward.
    """

    def __init__(
        self,
        slots: _VecSlots,
        robot: RobotPolicy,
        regressor: SemanticRegressor | None,
        cfg: TrainConfig,
    ):
        self.slots = slots
        self.cfg = cfg
        self.robot_runner = neural.Runner(robot.params, robot.spec)
        self.robot_state = neural.zero_state(robot.spec, batch=slots.batch)
        self.n_levels = robot.n_levels
        self.regressor_runner = None
        if cfg.level == LEVEL_B:
            if regressor is None:
                raise ValueError("Level B observer training needs a trained regressor")
            self.regressor_runner = neural.Runner(regressor.params, regressor.spec)
            self.regressor_state = neural.zero_state(regressor.spec, batch=slots.batch)
        self._pending = self._build_input()

    def _build_input(self) -> np.ndarray:
        slots = self.slots
        feats = slots.features_step()
        return build_observer_inputs(
            feats,
            slots.prev_robot_action,
            slots.prev_level,
            slots.aoi.astype(np.float64),
            self.n_levels,
            self.cfg.use_aoi_input,
        )

    def inputs(self) -> np.ndarray:
        return self._pending

    def step(self, levels: np.ndarray):
        slots = self.slots
        cfg = self.cfg
        feats = slots._last_feats
        deq, ell = slots.transmit(levels)
        tx = levels != codec.NULL_LEVEL
        slots.ep_bytes += ell
        slots.ep_tx += tx.astype(np.int64)

        x_rob = build_robot_inputs(deq, levels, self.n_levels)
        logits, _, self.robot_state = self.robot_runner.step_batch(x_rob, self.robot_state)
        actions = np.argmax(logits, axis=1)

        if cfg.level == LEVEL_A:
            if slots.pixel:
                base = _psnr_rows(
                    slots._pooled_pair, slots.projection.reconstruct(slots.held), 1.0
                )
            else:
                obs_true = reconstruct_obs_norm(feats)
                obs_hat = reconstruct_obs_norm(slots.held)
                base = _psnr_rows(obs_true, obs_hat)
        elif cfg.level == LEVEL_B:
            pred, _, self.regressor_state = self.regressor_runner.step_batch(
                x_rob, self.regressor_state
            )
            s_rob = pred * slots.scales
            # Observer-side state estimate: own features in vector mode (a
            # near-perfect noisy view), the true state in pixel mode.
            s_obs = slots.states if slots.pixel else feats[:, :4] * slots.scales
            base = -((s_obs - s_rob) ** 2).mean(axis=1)
        else:
            base = None  # filled with the control reward below

        env_rewards, dones, fell = slots.env_step(actions)
        if base is None:
            base = env_rewards
        obs_rewards = base - cfg.beta * ell
        slots.ep_obs_return += obs_rewards
        scale = cfg.scale_for(cfg.level)
        slots.prev_robot_action = actions.copy()
        slots.prev_level = levels.copy()
        slots.aoi = np.where(tx, 0, slots.aoi + 1)

        term = np.zeros((slots.batch, observer_input_dim(feats.shape[1], self.n_levels)))
        term_fixed = np.full(slots.batch, np.nan)
        if dones.any():
            # Crash: the final base reward repeats forever with no further cost.
            term_fixed[fell] = scale * base[fell] / (1.0 - cfg.gamma)
            trunc = np.nonzero(dones & ~fell)[0]
            if trunc.size:
                term[trunc] = build_observer_inputs(
                    slots.observe_features(trunc),
                    slots.prev_robot_action[trunc],
                    slots.prev_level[trunc],
                    slots.aoi[trunc].astype(np.float64),
                    self.n_levels,
                    cfg.use_aoi_input,
                )
        finished = slots.finish_and_reset(dones)
        if dones.any():
            self.robot_state.h[dones] = 0.0
            self.robot_state.c[dones] = 0.0
            if self.regressor_runner is not None:
                self.regressor_state.h[dones] = 0.0
                self.regressor_state.c[dones] = 0.0
        self._pending = self._build_input()
        return obs_rewards * scale, dones, finished, term, term_fixed


def train_observer_a2c(
    env_cfg: env.EnvConfig,
    ensemble: codec.CodebookEnsemble,
    robot: RobotPolicy,
    regressor: SemanticRegressor | None,
    cfg: TrainConfig,
    log_path=None,
    projection: codec.PatchProjection | None = None,
) -> ObserverPolicy:
    """A2C training of the level-selection policy against a frozen greedy robot."""
    observer = new_observer(
        ensemble.n_features,
        ensemble.max_level,
        substream(cfg.seed, "init/observer"),
        use_aoi_input=cfg.use_aoi_input,
    )
    if cfg.observer_episodes <= 0:
        return observer
    slots = _VecSlots(env_cfg, ensemble, cfg.n_envs, substream(cfg.seed, "env/observer"),
                      projection)
    adapter = _ObserverAdapter(slots, robot, regressor, cfg)
    loop = _A2CLoop(observer.spec, observer.params, cfg, substream(cfg.seed, "sampling/observer"))

    def make_eval_adapter():
        eval_slots = _VecSlots(env_cfg, ensemble, cfg.n_envs,
                               substream(cfg.seed, "select/env/observer"), projection)
        return _ObserverAdapter(eval_slots, robot, regressor, cfg), eval_slots

    def eval_hook(params: np.ndarray) -> float:
        return _fixed_rollout_score(params, observer.spec, make_eval_adapter, cfg,
                                    "discounted", False, "select/sampling/observer")

    with _train_log(log_path) as log_writer:
        observer.params = loop.run(adapter, cfg.observer_episodes, log_writer, eval_hook)
    return observer


# ---------------------------------------------------------------------------
# Regressor training


def train_regressor(
    env_cfg: env.EnvConfig,
    ensemble: codec.CodebookEnsemble,
    robot: RobotPolicy,
    cfg: TrainConfig,
    log_path=None,
    projection: codec.PatchProjection | None = None,
) -> SemanticRegressor:
    """Supervised training on greedy-robot traces at v = V.

    Collects cfg.regressor_episodes episodes of (robot input, normalized true
    state) pairs, then minimizes the MSE over minibatches of bptt_window
    segments for cfg.regressor_epochs passes.
    """
    regressor = new_regressor(ensemble.n_features, ensemble.max_level,
                              substream(cfg.seed, "init/regressor"))
    if cfg.regressor_episodes <= 0 or cfg.regressor_epochs <= 0:
        return regressor
    inputs, targets = _collect_regressor_data(env_cfg, ensemble, robot, cfg, projection)

    w = cfg.bptt_window
    in_dim = regressor.spec.input_dim
    segments = []
    for ep_x, ep_y in zip(inputs, targets):
        for start in range(0, len(ep_x), w):
            seg_x = ep_x[start : start + w]
            seg_y = ep_y[start : start + w]
            n = len(seg_x)
            if n < w:  # zero-pad the tail; padded steps carry no loss
                seg_x = np.vstack([seg_x, np.zeros((w - n, in_dim))])
                seg_y = np.vstack([seg_y, np.zeros((w - n, 4))])
            mask = np.zeros(w)
            mask[:n] = 1.0
            segments.append((seg_x, seg_y, mask))
    if not segments:
        raise ValueError("no training segments; increase regressor_episodes")

    rng = substream(cfg.seed, "sampling/regressor")
    moments = neural.zero_moments(regressor.params.shape[0])
    params = regressor.params
    adam_t = 0
    rows = []
    for epoch in range(cfg.regressor_epochs):
        order = rng.permutation(len(segments))
        for chunk_start in range(0, len(order), cfg.batch_size):
            chunk = order[chunk_start : chunk_start + cfg.batch_size]
            xs = np.stack([segments[i][0] for i in chunk], axis=1)
            ys = np.stack([segments[i][1] for i in chunk], axis=1)
            mask = np.stack([segments[i][2] for i in chunk], axis=1)
            batch = xs.shape[1]
            state = neural.zero_state(regressor.spec, batch=batch)
            preds, _, _, cache = neural.forward_sequence(params, regressor.spec, xs, state)
            err = (preds - ys) * mask[:, :, None]
            denom = mask.sum() * 4.0
            loss = float((err**2).sum() / denom)
            if not math.isfinite(loss):
                raise RuntimeError("non-finite regressor loss; diverged")
            dlogits = 2.0 * err / denom
            grad = neural.backward_sequence(params, regressor.spec, cache, dlogits)
            grad = neural.clip_gradient(grad, cfg.grad_clip)
            adam_t += 1
            params, moments = neural.adam_step(params, grad, moments, cfg.lr_regressor, adam_t)
            rows.append((epoch, adam_t, loss))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "update", "mse"])
            writer.writerows(rows)
    regressor.params = params
    return regressor


def _collect_regressor_data(env_cfg, ensemble, robot, cfg, projection=None):
    slots = _VecSlots(env_cfg, ensemble, cfg.n_envs, substream(cfg.seed, "env/regressor"),
                      projection)
    runner = neural.Runner(robot.params, robot.spec)
    robot_state = neural.zero_state(robot.spec, batch=cfg.n_envs)
    v_max = ensemble.max_level
    per_slot_x: list[list[np.ndarray]] = [[] for _ in range(cfg.n_envs)]
    per_slot_y: list[list[np.ndarray]] = [[] for _ in range(cfg.n_envs)]
    episodes_x: list[np.ndarray] = []
    episodes_y: list[np.ndarray] = []
    done_count = 0
    while done_count < cfg.regressor_episodes:
        feats = slots.features_step()
        levels = np.full(cfg.n_envs, v_max, dtype=np.int64)
        deq, _ = slots.transmit(levels)
        x = build_robot_inputs(deq, levels, robot.n_levels)
        y = slots.states / slots.scales
        logits, _, robot_state = runner.step_batch(x, robot_state)
        actions = np.argmax(logits, axis=1)
        for i in range(cfg.n_envs):
            per_slot_x[i].append(x[i])
            per_slot_y[i].append(y[i])
        _, dones, _ = slots.env_step(actions)
        slots.finish_and_reset(dones)
        for i in np.nonzero(dones)[0]:
            episodes_x.append(np.array(per_slot_x[i]))
            episodes_y.append(np.array(per_slot_y[i]))
            per_slot_x[i] = []
            per_slot_y[i] = []
            done_count += 1
            robot_state.h[i] = 0.0
            robot_state.c[i] = 0.0
    return episodes_x, episodes_y


# ---------------------------------------------------------------------------
# Training log plumbing


class _train_log:
    """CSV log of per-episode training statistics (no-op when path is None)."""

    COLUMNS = [
        "episode", "return", "length", "obs_return", "tx_freq", "mean_ell",
        "policy_loss", "value_loss", "entropy",
    ]

    def __init__(self, path):
        self.path = path
        self.fh = None

    def __enter__(self):
        if self.path is None:
            return None
        self.fh = open(self.path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(self.COLUMNS)

        def write(episode: int, info: dict, losses):
            self.writer.writerow(
                [
                    episode,
                    repr(info["return"]),
                    info["length"],
                    repr(info["obs_return"]),
                    repr(info["tx_freq"]),
                    repr(info["mean_ell"]),
                    repr(losses[0]),
                    repr(losses[1]),
                    repr(losses[2]),
                ]
            )

        return write

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()
        return False
