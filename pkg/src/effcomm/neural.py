"""Minimal differentiable substrate for the recurrent agents.

One fixed architecture, in 64-bit floats throughout: input -> single LSTM
layer -> ReLU -> dense hidden layer -> linear policy head (+ optional scalar
value head). Parameters live in one flat array with a deterministic layout,
gradients come from truncated backpropagation through time, and updates use
Adam. A finite-difference harness verifies the analytic gradients.

The batched sequence forms (`forward_sequence` / `backward_sequence`) carry
an extra leading batch axis so training loops can run many environment slots
in lockstep; per-step `reset` flags zero the recurrent state before an input
is consumed and stop gradients from crossing episode boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid

_CHECKPOINT_MAGIC = b"EFCK"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    recurrent_hidden: int = 64
    mlp_hidden: int = 128
    policy_outputs: int = 2
    has_value_head: bool = True

    def __post_init__(self):
        for name in ("input_dim", "recurrent_hidden", "mlp_hidden", "policy_outputs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class RecurrentState:
    """Hidden and cell activations; shape (H,) or (B, H)."""

    h: np.ndarray
    c: np.ndarray


def zero_state(spec: NetworkSpec, batch: int | None = None) -> RecurrentState:
    shape = (spec.recurrent_hidden,) if batch is None else (batch, spec.recurrent_hidden)
    return RecurrentState(h=np.zeros(shape), c=np.zeros(shape))


# ---------------------------------------------------------------------------
# Parameter layout


def layout(spec: NetworkSpec) -> list[tuple[str, int, tuple[int, ...]]]:
    """(name, offset, shape) for every weight block, covering the flat array once."""
    d, h, m, p = spec.input_dim, spec.recurrent_hidden, spec.mlp_hidden, spec.policy_outputs
    blocks = [
        ("lstm_wx", (d, 4 * h)),
        ("lstm_wh", (h, 4 * h)),
        ("lstm_b", (4 * h,)),
        ("fc_w", (h, m)),
        ("fc_b", (m,)),
        ("policy_w", (m, p)),
        ("policy_b", (p,)),
    ]
    if spec.has_value_head:
        blocks += [("value_w", (m, 1)), ("value_b", (1,))]
    out = []
    offset = 0
    for name, shape in blocks:
        out.append((name, offset, shape))
        offset += int(np.prod(shape))
    return out


def n_params(spec: NetworkSpec) -> int:
    name, offset, shape = layout(spec)[-1]
    return offset + int(np.prod(shape))


def views(flat: np.ndarray, spec: NetworkSpec) -> dict[str, np.ndarray]:
    """Named reshaped views into the flat array (shared memory)."""
    if flat.shape != (n_params(spec),):
        raise ValueError(f"expected flat array of length {n_params(spec)}")
    return {
        name: flat[offset : offset + int(np.prod(shape))].reshape(shape)
        for name, offset, shape in layout(spec)
    }


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal recurrent blocks, uniform +-1/sqrt(fan_in) elsewhere, forget bias 1."""
    flat = np.zeros(n_params(spec))
    v = views(flat, spec)
    h = spec.recurrent_hidden

    def uniform(arr: np.ndarray, fan_in: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        arr[...] = rng.uniform(-bound, bound, size=arr.shape)

    uniform(v["lstm_wx"], spec.input_dim)
    for gate in range(4):
        v["lstm_wh"][:, gate * h : (gate + 1) * h] = _orthogonal(h, rng)
    v["lstm_b"][h : 2 * h] = 1.0
    uniform(v["fc_w"], h)
    uniform(v["policy_w"], spec.mlp_hidden)
    if spec.has_value_head:
        uniform(v["value_w"], spec.mlp_hidden)
    return flat


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(n, n))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


# ---------------------------------------------------------------------------
# Forward


@dataclass
class SequenceCache:
    """Activations recorded by forward_sequence for the backward pass."""

    xs: np.ndarray  # (T, B, D)
    h_prev: np.ndarray  # (T, B, H) state after any reset, before the cell
    c_prev: np.ndarray
    gates: np.ndarray  # (T, B, 4H) post-nonlinearity [i, f, g, o]
    c_new: np.ndarray  # (T, B, H)
    tanh_c: np.ndarray
    h_new: np.ndarray
    pre: np.ndarray  # (T, B, M) dense pre-activation
    u: np.ndarray  # (T, B, M)
    resets: np.ndarray  # (T, B) bool


def forward_sequence(
    flat: np.ndarray,
    spec: NetworkSpec,
    xs: np.ndarray,
    state: RecurrentState,
    resets: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, RecurrentState, SequenceCache]:
    """Run T lockstep steps over a batch: returns (logits, values, state', cache).

    xs has shape (T, B, D); resets (T, B) zeroes a slot's recurrent state
    before its input at that step is consumed.
    """
    t_len, batch, d = xs.shape
    if d != spec.input_dim:
        raise ValueError(f"input dim {d} != expected {spec.input_dim}")
    hdim = spec.recurrent_hidden
    v = views(flat, spec)
    if resets is None:
        resets = np.zeros((t_len, batch), dtype=bool)

    h = np.array(state.h, dtype=np.float64, copy=True)
    c = np.array(state.c, dtype=np.float64, copy=True)
    if h.shape != (batch, hdim):
        raise ValueError("recurrent state shape mismatch")

    xw = xs.reshape(t_len * batch, d) @ v["lstm_wx"]
    xw = xw.reshape(t_len, batch, 4 * hdim) + v["lstm_b"]

    cache = SequenceCache(
        xs=xs,
        h_prev=np.empty((t_len, batch, hdim)),
        c_prev=np.empty((t_len, batch, hdim)),
        gates=np.empty((t_len, batch, 4 * hdim)),
        c_new=np.empty((t_len, batch, hdim)),
        tanh_c=np.empty((t_len, batch, hdim)),
        h_new=np.empty((t_len, batch, hdim)),
        pre=np.empty((t_len, batch, spec.mlp_hidden)),
        u=np.empty((t_len, batch, spec.mlp_hidden)),
        resets=resets.astype(bool),
    )

    wh = v["lstm_wh"]
    for t in range(t_len):
        mask = cache.resets[t]
        if mask.any():
            h[mask] = 0.0
            c[mask] = 0.0
        cache.h_prev[t] = h
        cache.c_prev[t] = c
        z = xw[t] + h @ wh
        gi = _sigmoid(z[:, :hdim])
        gf = _sigmoid(z[:, hdim : 2 * hdim])
        gg = np.tanh(z[:, 2 * hdim : 3 * hdim])
        go = _sigmoid(z[:, 3 * hdim :])
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        cache.gates[t, :, :hdim] = gi
        cache.gates[t, :, hdim : 2 * hdim] = gf
        cache.gates[t, :, 2 * hdim : 3 * hdim] = gg
        cache.gates[t, :, 3 * hdim :] = go
        cache.c_new[t] = c
        cache.tanh_c[t] = tc
        cache.h_new[t] = h

    y = np.maximum(cache.h_new, 0.0)
    pre = y.reshape(t_len * batch, hdim) @ v["fc_w"] + v["fc_b"]
    u = np.maximum(pre, 0.0)
    logits = u @ v["policy_w"] + v["policy_b"]
    cache.pre = pre.reshape(t_len, batch, spec.mlp_hidden)
    cache.u = u.reshape(t_len, batch, spec.mlp_hidden)
    if spec.has_value_head:
        values = (u @ v["value_w"] + v["value_b"])[:, 0].reshape(t_len, batch)
    else:
        values = np.zeros((t_len, batch))
    return (
        logits.reshape(t_len, batch, spec.policy_outputs),
        values,
        RecurrentState(h=h, c=c),
        cache,
    )


def forward(
    flat: np.ndarray,
    spec: NetworkSpec,
    x: np.ndarray,
    state: RecurrentState | None = None,
) -> tuple[np.ndarray, float, RecurrentState]:
    """Single step on a single input vector: (logits, value, state')."""
    if state is None:
        state = zero_state(spec)
    xs = np.asarray(x, dtype=np.float64).reshape(1, 1, -1)
    batch_state = RecurrentState(h=state.h.reshape(1, -1), c=state.c.reshape(1, -1))
    logits, values, out_state, _ = forward_sequence(flat, spec, xs, batch_state)
    return (
        logits[0, 0],
        float(values[0, 0]),
        RecurrentState(h=out_state.h[0], c=out_state.c[0]),
    )


class Runner:
    """Cache-free forward stepping against a frozen parameter snapshot."""

    def __init__(self, flat: np.ndarray, spec: NetworkSpec):
        self.spec = spec
        self.v = views(flat, spec)

    def step(
        self, x: np.ndarray, state: RecurrentState
    ) -> tuple[np.ndarray, float, RecurrentState]:
        """One step on a single (D,) input."""
        hdim = self.spec.recurrent_hidden
        v = self.v
        z = x @ v["lstm_wx"] + state.h @ v["lstm_wh"] + v["lstm_b"]
        gi = _sigmoid(z[:hdim])
        gf = _sigmoid(z[hdim : 2 * hdim])
        gg = np.tanh(z[2 * hdim : 3 * hdim])
        go = _sigmoid(z[3 * hdim :])
        c = gf * state.c + gi * gg
        h = go * np.tanh(c)
        u = np.maximum(np.maximum(h, 0.0) @ v["fc_w"] + v["fc_b"], 0.0)
        logits = u @ v["policy_w"] + v["policy_b"]
        value = float(u @ v["value_w"][:, 0] + v["value_b"][0]) if self.spec.has_value_head else 0.0
        return logits, value, RecurrentState(h=h, c=c)

    def step_batch(
        self, xs: np.ndarray, state: RecurrentState
    ) -> tuple[np.ndarray, np.ndarray, RecurrentState]:
        """One lockstep step on (B, D) inputs."""
        hdim = self.spec.recurrent_hidden
        v = self.v
        z = xs @ v["lstm_wx"] + state.h @ v["lstm_wh"] + v["lstm_b"]
        gi = _sigmoid(z[:, :hdim])
        gf = _sigmoid(z[:, hdim : 2 * hdim])
        gg = np.tanh(z[:, 2 * hdim : 3 * hdim])
        go = _sigmoid(z[:, 3 * hdim :])
        c = gf * state.c + gi * gg
        h = go * np.tanh(c)
        u = np.maximum(np.maximum(h, 0.0) @ v["fc_w"] + v["fc_b"], 0.0)
        logits = u @ v["policy_w"] + v["policy_b"]
        if self.spec.has_value_head:
            values = u @ v["value_w"][:, 0] + v["value_b"][0]
        else:
            values = np.zeros(xs.shape[0])
        return logits, values, RecurrentState(h=h, c=c)


# ---------------------------------------------------------------------------
# Backward (truncated BPTT)


def backward_sequence(
    flat: np.ndarray,
    spec: NetworkSpec,
    cache: SequenceCache,
    dlogits: np.ndarray,
    dvalues: np.ndarray | None = None,
    window: int | None = None,
) -> np.ndarray:
    """Gradient of sum_t <dlogits_t, logits_t> + dvalues_t * value_t w.r.t. params.

    `window` truncates the backward recurrence: gradients do not flow across
    chunk boundaries placed every `window` steps from the sequence start
    (None, or any value >= T, keeps the full recurrence). Episode resets in
    the cache always block the flow.
    """
    t_len, batch, hdim = cache.h_new.shape
    v = views(flat, spec)
    grad = np.zeros_like(flat)
    g = views(grad, spec)
    if dvalues is None:
        dvalues = np.zeros((t_len, batch))
    if window is None or window > t_len:
        window = t_len
    if window < 1:
        raise ValueError("window must be >= 1")

    tb = t_len * batch
    u = cache.u.reshape(tb, spec.mlp_hidden)
    dlog_flat = dlogits.reshape(tb, spec.policy_outputs)
    du = dlog_flat @ v["policy_w"].T
    g["policy_w"][...] = u.T @ dlog_flat
    g["policy_b"][...] = dlog_flat.sum(axis=0)
    if spec.has_value_head:
        dval_flat = dvalues.reshape(tb)
        du += dval_flat[:, None] * v["value_w"][:, 0]
        g["value_w"][:, 0] = u.T @ dval_flat
        g["value_b"][0] = dval_flat.sum()
    dpre = du * (cache.pre.reshape(tb, -1) > 0.0)
    y = np.maximum(cache.h_new, 0.0).reshape(tb, hdim)
    g["fc_w"][...] = y.T @ dpre
    g["fc_b"][...] = dpre.sum(axis=0)
    dy = dpre @ v["fc_w"].T
    dh_head = (dy * (cache.h_new.reshape(tb, hdim) > 0.0)).reshape(t_len, batch, hdim)

    wh = v["lstm_wh"]
    dz_all = np.empty((t_len, batch, 4 * hdim))
    dh_next = np.zeros((batch, hdim))
    dc_next = np.zeros((batch, hdim))
    for t in range(t_len - 1, -1, -1):
        gi = cache.gates[t, :, :hdim]
        gf = cache.gates[t, :, hdim : 2 * hdim]
        gg = cache.gates[t, :, 2 * hdim : 3 * hdim]
        go = cache.gates[t, :, 3 * hdim :]
        tc = cache.tanh_c[t]
        dh = dh_head[t] + dh_next
        dc = dh * go * (1.0 - tc**2) + dc_next
        dz = dz_all[t]
        dz[:, :hdim] = dc * gg * gi * (1.0 - gi)
        dz[:, hdim : 2 * hdim] = dc * cache.c_prev[t] * gf * (1.0 - gf)
        dz[:, 2 * hdim : 3 * hdim] = dc * gi * (1.0 - gg**2)
        dz[:, 3 * hdim :] = dh * tc * go * (1.0 - go)
        dh_next = dz @ wh.T
        dc_next = dc * gf
        blocked = cache.resets[t]
        if t % window == 0:
            dh_next[...] = 0.0
            dc_next[...] = 0.0
        elif blocked.any():
            dh_next[blocked] = 0.0
            dc_next[blocked] = 0.0

    dz_flat = dz_all.reshape(tb, 4 * hdim)
    g["lstm_wx"][...] = cache.xs.reshape(tb, spec.input_dim).T @ dz_flat
    g["lstm_wh"][...] = cache.h_prev.reshape(tb, hdim).T @ dz_flat
    g["lstm_b"][...] = dz_flat.sum(axis=0)
    return grad


def backward_bptt(
    flat: np.ndarray,
    spec: NetworkSpec,
    trajectory: list[tuple[np.ndarray, np.ndarray, float]],
    window: int | None = None,
) -> np.ndarray:
    """Gradient over one trajectory of (input, dlogits, dvalue) triples.

    The per-step target-gradients are the derivatives of the caller's loss
    with respect to the heads' outputs; this routine chains them back through
    the dense layers and `window` steps of recurrence.
    """
    if not trajectory:
        raise ValueError("trajectory must be non-empty")
    t_len = len(trajectory)
    xs = np.stack([np.asarray(x, dtype=np.float64) for x, _, _ in trajectory])[:, None, :]
    dlogits = np.stack([np.asarray(dl, dtype=np.float64) for _, dl, _ in trajectory])[:, None, :]
    dvalues = np.array([dv for _, _, dv in trajectory], dtype=np.float64)[:, None]
    _, _, _, cache = forward_sequence(flat, spec, xs, zero_state(spec, batch=1))
    return backward_sequence(flat, spec, cache, dlogits, dvalues, window=window)


def grad_check(
    flat: np.ndarray,
    spec: NetworkSpec,
    trajectory: list[tuple[np.ndarray, np.ndarray, float]],
    rng: np.random.Generator,
    n_sample: int = 200,
    eps: float = 1e-5,
    window: int | None = None,
) -> float:
    """Max relative error between analytic BPTT and central finite differences.

    The implied scalar loss is sum_t <dlogits_t, logits_t> + dvalue_t * value_t
    with the target-gradients held constant, so central differences of that
    loss probe exactly what backward_bptt computes.
    """
    if len(trajectory) > 8:
        raise ValueError("keep grad_check trajectories short (<= 8 steps)")
    if n_sample < 1:
        raise ValueError("need at least one sampled parameter")
    analytic = backward_bptt(flat, spec, trajectory, window=window)

    def loss(theta: np.ndarray) -> float:
        xs = np.stack([np.asarray(x, dtype=np.float64) for x, _, _ in trajectory])[:, None, :]
        logits, values, _, _ = forward_sequence(theta, spec, xs, zero_state(spec, batch=1))
        total = 0.0
        for t, (_, dl, dv) in enumerate(trajectory):
            total += float(np.dot(logits[t, 0], dl)) + dv * float(values[t, 0])
        return total

    total_params = flat.shape[0]
    idx = rng.choice(total_params, size=min(n_sample, total_params), replace=False)
    worst = 0.0
    for i in idx:
        theta = flat.copy()
        theta[i] = flat[i] + eps
        hi = loss(theta)
        theta[i] = flat[i] - eps
        lo = loss(theta)
        numeric = (hi - lo) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Optimizer and sampling


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray


def zero_moments(n: int) -> AdamMoments:
    return AdamMoments(m=np.zeros(n), v=np.zeros(n))


def adam_step(
    params: np.ndarray,
    gradient: np.ndarray,
    moments: AdamMoments,
    lr: float | np.ndarray,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamMoments]:
    """Standard bias-corrected Adam update; `t` is the 1-based step count.

    `lr` may be a scalar or a per-parameter array (parameter groups).
    """
    if params.shape != gradient.shape or params.shape != moments.m.shape:
        raise ValueError("parameter, gradient, and moment shapes must match")
    if t < 1:
        raise ValueError("step count is 1-based")
    m = beta1 * moments.m + (1.0 - beta1) * gradient
    v = beta2 * moments.v + (1.0 - beta2) * gradient**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamMoments(m=m, v=v)


def clip_gradient(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm > 0:
        return grad * (max_norm / norm)
    return grad


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis; strictly positive for finite logits."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    z = np.maximum(z, -700.0)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def categorical_entropy(probs: np.ndarray) -> np.ndarray:
    """Entropy in nats along the last axis (0 log 0 = 0)."""
    p = np.asarray(probs)
    logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -(p * logp).sum(axis=-1)


def sample_categorical(
    logits: np.ndarray, rng: np.random.Generator | None = None, greedy: bool = False
) -> int:
    """Sample from softmax(logits); greedy returns the lowest-index argmax."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if greedy:
        return int(np.argmax(logits))
    if rng is None:
        raise ValueError("sampling requires an rng")
    p = softmax(logits)
    return int(np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(0, p.size - 1))


def sample_categorical_batch(
    logits: np.ndarray, uniforms: np.ndarray
) -> np.ndarray:
    """Vectorized sampling: one uniform draw per row of logits."""
    p = softmax(logits)
    cum = np.cumsum(p, axis=-1)
    idx = (uniforms[:, None] > cum).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path,
    spec: NetworkSpec,
    params: np.ndarray,
    moments: AdamMoments | None = None,
    step: int = 0,
) -> None:
    """Write magic, version, spec fields, parameters, then Adam state."""
    if moments is None:
        moments = zero_moments(params.shape[0])
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIII",
                _CHECKPOINT_VERSION,
                spec.input_dim,
                spec.recurrent_hidden,
                spec.mlp_hidden,
                spec.policy_outputs,
                1 if spec.has_value_head else 0,
            )
        )
        fh.write(struct.pack("<Q", params.shape[0]))
        fh.write(np.ascontiguousarray(params, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", step))
        fh.write(np.ascontiguousarray(moments.m, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(moments.v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkSpec, np.ndarray, AdamMoments, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, d, h, m, p, hv = struct.unpack("<IIIIII", fh.read(24))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        spec = NetworkSpec(
            input_dim=d,
            recurrent_hidden=h,
            mlp_hidden=m,
            policy_outputs=p,
            has_value_head=bool(hv),
        )
        (count,) = struct.unpack("<Q", fh.read(8))
        if count != n_params(spec):
            raise ValueError(f"{path}: parameter count does not match spec")
        params = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
        (step,) = struct.unpack("<Q", fh.read(8))
        mom_m = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
        mom_v = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
    return spec, params, AdamMoments(m=mom_m, v=mom_v), step
