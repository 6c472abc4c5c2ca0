"""Figure-level quantities: trade-off points, Pareto dominance, RMSD,
state-space maps, and AoI-conditioned action distributions, with CSV export.

All aggregation is over immutable episode traces produced by the remote
loop; schemes differ only in which observer (trained policy or fixed-level
stub) selects the compression level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import codec, env, loop
from .agents import ObserverPolicy, RobotPolicy, SemanticRegressor

DEFAULT_VAR_RANGES: dict[str, tuple[float, float]] = {
    "x": (-4.8, 4.8),
    "x_dot": (-1.97, 1.97),
    "psi": (-0.2, 0.2),
    "psi_dot": (-1.67, 1.67),
}
PROJECTION_VARS = ("x", "x_dot", "psi", "psi_dot")


@dataclass
class Scheme:
    """One evaluated configuration: an observer plus its reward bookkeeping."""

    scheme_id: str
    observer: ObserverPolicy | loop.FixedLevelObserver
    beta: float | None = None
    reward_level: str = "C"


@dataclass
class MetricPoint:
    """Aggregate metrics of one scheme over an evaluation run."""

    scheme_id: str
    beta: float | None
    reward_level: str
    ell_mean: float
    ep_len_mean: float
    psnr_mean: float
    state_mse_mean: float
    rmsd_psi: float
    rmsd_x: float
    level_freqs: np.ndarray
    ep_lengths: np.ndarray = field(repr=False, default=None)


def evaluate_suite(
    scheme: Scheme,
    env_cfg: env.EnvConfig,
    ensemble: codec.CodebookEnsemble,
    robot: RobotPolicy,
    n_episodes: int,
    rng: np.random.Generator,
    regressor: SemanticRegressor | None = None,
    keep_traces: int = 0,
    projection=None,
) -> tuple[MetricPoint, list[loop.EpisodeTrace]]:
    """Run n greedy-robot episodes of a scheme and aggregate every metric.

    Per-step quantities (bytes, PSNR, state MSE) are averaged within each
    episode first, then across episodes. Returns the metric point plus the
    first `keep_traces` traces for downstream analysis.
    """
    lengths = np.empty(n_episodes)
    ells = np.empty(n_episodes)
    psnrs = np.empty(n_episodes)
    mses = np.empty(n_episodes)
    rmsd_psis = np.empty(n_episodes)
    rmsd_xs = np.empty(n_episodes)
    level_counts = np.zeros(ensemble.max_level + 1)
    kept = []
    reward_level = scheme.reward_level if scheme.beta is not None else "C"
    beta = scheme.beta if scheme.beta is not None else 0.0
    for ep in range(n_episodes):
        trace = loop.run_episode(
            env_cfg,
            ensemble,
            scheme.observer,
            robot,
            rng,
            regressor=regressor,
            beta=beta,
            reward_level=reward_level,
            projection=projection,
        )
        lengths[ep] = len(trace)
        ells[ep] = trace.ell.mean()
        psnrs[ep] = trace.psnr_db.mean()
        mses[ep] = trace.state_mse.mean()
        rmsd_psis[ep] = rmsd(trace.states[:, 2], 0.0)
        rmsd_xs[ep] = rmsd(trace.states[:, 0], 0.0)
        level_counts += np.bincount(trace.levels, minlength=ensemble.max_level + 1)
        if ep < keep_traces:
            kept.append(trace)
    point = MetricPoint(
        scheme_id=scheme.scheme_id,
        beta=scheme.beta,
        reward_level=scheme.reward_level if scheme.beta is not None else "",
        ell_mean=float(ells.mean()),
        ep_len_mean=float(lengths.mean()),
        psnr_mean=float(psnrs.mean()),
        state_mse_mean=float(mses.mean()),
        rmsd_psi=float(rmsd_psis.mean()),
        rmsd_x=float(rmsd_xs.mean()),
        level_freqs=level_counts / level_counts.sum(),
        ep_lengths=lengths,
    )
    return point, kept


# ---------------------------------------------------------------------------
# Pareto machinery


def pareto_dominates(eta: tuple, eta_prime: tuple) -> bool:
    """True iff eta is strictly better in some coordinate and no worse in all.

    Coordinates must be oriented larger-is-better by the caller (negate byte
    counts).
    """
    if len(eta) != len(eta_prime):
        raise ValueError("tuples must have equal arity")
    no_worse = all(a >= b for a, b in zip(eta, eta_prime))
    strictly_better = any(a > b for a, b in zip(eta, eta_prime))
    return no_worse and strictly_better


def pareto_front(points: list[tuple]) -> list[tuple]:
    """Maximal non-dominated subset, preserving the input order."""
    return [
        p
        for i, p in enumerate(points)
        if not any(pareto_dominates(q, p) for j, q in enumerate(points) if j != i)
    ]


def rmsd(series: np.ndarray, target: float) -> float:
    """Root-mean-square deviation from the target value."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("series must be non-empty")
    return float(np.sqrt(np.mean((arr - target) ** 2)))


def bootstrap_mean_ci(
    values: np.ndarray,
    rng: np.random.Generator,
    n_boot: int = 2000,
    alpha: float = 0.05,
) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean."""
    arr = np.asarray(values, dtype=np.float64)
    idx = rng.integers(0, arr.size, size=(n_boot, arr.size))
    means = arr[idx].mean(axis=1)
    return (
        float(np.quantile(means, alpha / 2.0)),
        float(np.quantile(means, 1.0 - alpha / 2.0)),
    )


# ---------------------------------------------------------------------------
# State-space maps


@dataclass
class GridMap:
    """Cell values over a 2-D projection of the state space.

    Cells with fewer than the minimum sample count are absent (NaN value,
    count still recorded).
    """

    x_var: str
    y_var: str
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    bins: int
    values: np.ndarray  # (bins, bins), NaN where absent
    counts: np.ndarray  # (bins, bins)


def traces_to_table(traces: list[loop.EpisodeTrace]) -> dict[str, np.ndarray]:
    """Flatten traces into the per-step column table used by the analyses."""
    if not traces:
        raise ValueError("no traces given")
    return {
        "episode": np.concatenate(
            [np.full(len(tr), i, dtype=np.int64) for i, tr in enumerate(traces)]
        ),
        "t": np.concatenate([np.arange(len(tr), dtype=np.int64) for tr in traces]),
        "x": np.concatenate([tr.states[:, 0] for tr in traces]),
        "x_dot": np.concatenate([tr.states[:, 1] for tr in traces]),
        "psi": np.concatenate([tr.states[:, 2] for tr in traces]),
        "psi_dot": np.concatenate([tr.states[:, 3] for tr in traces]),
        "level": np.concatenate([tr.levels for tr in traces]),
        "ell": np.concatenate([tr.ell for tr in traces]),
        "action": np.concatenate([tr.actions for tr in traces]),
        "reward": np.concatenate([tr.env_rewards for tr in traces]),
        "aoi": np.concatenate([tr.aoi for tr in traces]),
        "entropy": np.concatenate([tr.robot_entropy_bits for tr in traces]),
        "value": np.concatenate([tr.values for tr in traces]),
    }


def _grid_assign(
    table: dict[str, np.ndarray],
    projection: tuple[str, str],
    ranges: dict[str, tuple[float, float]],
    bins: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(in-range mask, x bin, y bin) for every step of the table."""
    for var in projection:
        if var not in PROJECTION_VARS:
            raise ValueError(f"projection variable must be one of {PROJECTION_VARS}")
    xv = table[projection[0]]
    yv = table[projection[1]]
    (x_lo, x_hi) = ranges[projection[0]]
    (y_lo, y_hi) = ranges[projection[1]]
    ok = (xv >= x_lo) & (xv <= x_hi) & (yv >= y_lo) & (yv <= y_hi)
    bx = np.clip(((xv - x_lo) / (x_hi - x_lo) * bins).astype(np.int64), 0, bins - 1)
    by = np.clip(((yv - y_lo) / (y_hi - y_lo) * bins).astype(np.int64), 0, bins - 1)
    return ok, bx, by


def entropy_map(
    table: dict[str, np.ndarray],
    projection: tuple[str, str] = ("psi", "x_dot"),
    bins: int = 20,
    min_count: int = 20,
    ranges: dict[str, tuple[float, float]] | None = None,
) -> GridMap:
    """Binary entropy (bits) of the empirical robot-action frequency per cell."""
    ranges = ranges or DEFAULT_VAR_RANGES
    ok, bx, by = _grid_assign(table, projection, ranges, bins)
    flat = bx[ok] * bins + by[ok]
    counts = np.bincount(flat, minlength=bins * bins).reshape(bins, bins)
    rights = np.bincount(
        flat, weights=table["action"][ok].astype(np.float64), minlength=bins * bins
    ).reshape(bins, bins)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = rights / counts
        values = -(_xlog2(p) + _xlog2(1.0 - p))
    values[counts < min_count] = np.nan
    return GridMap(projection[0], projection[1], ranges[projection[0]],
                   ranges[projection[1]], bins, values, counts)


def _xlog2(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log2(p[pos])
    out[~np.isfinite(p)] = np.nan
    return out


def bitrate_map(
    table: dict[str, np.ndarray],
    projection: tuple[str, str] = ("psi", "x_dot"),
    bins: int = 20,
    min_count: int = 20,
    ranges: dict[str, tuple[float, float]] | None = None,
) -> GridMap:
    """Mean transmitted bytes per step in each cell."""
    ranges = ranges or DEFAULT_VAR_RANGES
    ok, bx, by = _grid_assign(table, projection, ranges, bins)
    flat = bx[ok] * bins + by[ok]
    counts = np.bincount(flat, minlength=bins * bins).reshape(bins, bins)
    totals = np.bincount(
        flat, weights=table["ell"][ok], minlength=bins * bins
    ).reshape(bins, bins)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = totals / counts
    values[counts < min_count] = np.nan
    return GridMap(projection[0], projection[1], ranges[projection[0]],
                   ranges[projection[1]], bins, values, counts)


def aoi_action_distribution(
    table: dict[str, np.ndarray],
    n_levels: int,
    entropy_bins: int = 10,
    max_aoi: int = 4,
    min_count: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Distribution of the chosen level per (AoI, robot-entropy bin).

    Returns (probs, counts): probs has shape (max_aoi + 1, entropy_bins,
    n_levels + 1); every present column sums to 1 over the level axis and
    absent columns (fewer than min_count samples) are NaN.
    """
    probs = np.full((max_aoi + 1, entropy_bins, n_levels + 1), np.nan)
    counts = np.zeros((max_aoi + 1, entropy_bins), dtype=np.int64)
    ent_bin = np.clip(
        (table["entropy"] * entropy_bins).astype(np.int64), 0, entropy_bins - 1
    )
    for aoi in range(max_aoi + 1):
        sel_aoi = table["aoi"] == aoi
        for b in range(entropy_bins):
            sel = sel_aoi & (ent_bin == b)
            n = int(sel.sum())
            counts[aoi, b] = n
            if n >= min_count and n > 0:
                hist = np.bincount(table["level"][sel], minlength=n_levels + 1)
                probs[aoi, b] = hist / n
    return probs, counts


def transmit_entropy_correlation(
    table: dict[str, np.ndarray],
    entropy_bins: int = 10,
    min_aoi: int = 2,
    min_count: int = 20,
) -> float:
    """Spearman rank correlation between the entropy bin index and the
    empirical transmit probability at AoI >= min_aoi."""
    from scipy.stats import spearmanr

    ent_bin = np.clip(
        (table["entropy"] * entropy_bins).astype(np.int64), 0, entropy_bins - 1
    )
    sel_aoi = table["aoi"] >= min_aoi
    xs, ys = [], []
    for b in range(entropy_bins):
        sel = sel_aoi & (ent_bin == b)
        if int(sel.sum()) >= min_count:
            xs.append(b)
            ys.append(float((table["level"][sel] > 0).mean()))
    if len(xs) < 3:
        raise ValueError("too few populated entropy bins for a rank correlation")
    rho = spearmanr(xs, ys).statistic
    return float(rho)


# ---------------------------------------------------------------------------
# CSV exports

PARETO_COLUMNS = [
    "scheme", "beta", "level", "ell_mean", "ep_len", "psnr", "state_mse",
    "rmsd_psi", "rmsd_x",
]


def write_pareto_csv(points: list[MetricPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PARETO_COLUMNS)
        for p in points:
            writer.writerow(
                [
                    p.scheme_id,
                    "" if p.beta is None else repr(float(p.beta)),
                    p.reward_level,
                    repr(p.ell_mean),
                    repr(p.ep_len_mean),
                    repr(p.psnr_mean),
                    repr(p.state_mse_mean),
                    repr(p.rmsd_psi),
                    repr(p.rmsd_x),
                ]
            )


def write_lenhist_csv(points: list[MetricPoint], path) -> None:
    """Per-scheme frequency of each chosen level: (scheme, ell, freq)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scheme", "ell", "freq"])
        for p in points:
            for ell, freq in enumerate(p.level_freqs):
                writer.writerow([p.scheme_id, ell, repr(float(freq))])


def write_heatmap_csv(grid: GridMap, path) -> None:
    """Present cells only: (x_bin, y_bin, value, count)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x_bin", "y_bin", "value", "count"])
        for i in range(grid.bins):
            for j in range(grid.bins):
                if math.isnan(grid.values[i, j]):
                    continue
                writer.writerow([i, j, repr(float(grid.values[i, j])), int(grid.counts[i, j])])


def write_aoi_csv(probs: np.ndarray, path) -> None:
    """Present columns only: (aoi, entropy_bin, ell, prob)."""
    n_aoi, n_bins, n_ell = probs.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["aoi", "entropy_bin", "ell", "prob"])
        for a in range(n_aoi):
            for b in range(n_bins):
                if math.isnan(probs[a, b, 0]):
                    continue
                for ell in range(n_ell):
                    writer.writerow([a, b, ell, repr(float(probs[a, b, ell]))])
