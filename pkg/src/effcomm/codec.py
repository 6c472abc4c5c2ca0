"""Feature extraction and the ensemble of per-feature vector quantizers.

A feature vector has F entries (default 8): the four normalized state
coordinates of the current snapshot plus the four normalized differences to
the previous snapshot. Each compression level v in 1..V owns one codebook
per feature with 2^v codewords of dimension K (default scalar). Level 0 is
the null action: nothing is transmitted and the message carries no payload.

Codebooks are fitted per feature with Lloyd's algorithm (k-means++ seeding,
best of n_init restarts), which keeps the quantizer semantics the selection
policy depends on: nearest-codeword encoding, discrete indices, and usage
perplexity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .env import Observation, PIXEL_MODE, VECTOR_MODE

DEFAULT_FEATURES = 8
DEFAULT_LEVELS = 6

_CODEBOOK_MAGIC = b"EFCB"
_CODEBOOK_VERSION = 1
_PROJECTION_MAGIC = b"EFPJ"
_PROJECTION_VERSION = 1


# ---------------------------------------------------------------------------
# Feature extraction


def extract_features(
    obs: Observation,
    scales: np.ndarray | None = None,
    projection: "PatchProjection | None" = None,
) -> np.ndarray:
    """Deterministic feature map from an observation to F values.

    Vector mode: (current / scales, (current - previous) / scales).
    Pixel mode: trained linear projection of the pooled frame pair.
    """
    if obs.mode == VECTOR_MODE:
        if scales is None:
            raise ValueError("vector-mode extraction needs the normalization scales")
        curr = obs.current / scales
        prev = obs.previous / scales
        return np.concatenate([curr, curr - prev])
    if projection is None:
        raise ValueError("pixel-mode extraction needs a trained projection")
    return projection.apply(pool_frame_pair(obs, projection.pool))


def pool_frame_pair(obs: Observation, pool: int) -> np.ndarray:
    """Average-pool both frames by `pool` and concatenate them flat."""
    if obs.mode != PIXEL_MODE:
        raise ValueError("pooling applies to pixel observations")
    return np.concatenate([_pool(obs.previous, pool), _pool(obs.current, pool)])


def _pool(frame: np.ndarray, pool: int) -> np.ndarray:
    h, w = frame.shape
    h2, w2 = h - h % pool, w - w % pool
    blocks = frame[:h2, :w2].astype(np.float64).reshape(h2 // pool, pool, w2 // pool, pool)
    return blocks.mean(axis=(1, 3)).ravel()


@dataclass(frozen=True, eq=False)
class PatchProjection:
    """Linear map from pooled frame-pair patches to F whitened features."""

    pool: int
    mean: np.ndarray
    components: np.ndarray  # (F, D)
    scale: np.ndarray  # (F,)

    def apply(self, patches: np.ndarray) -> np.ndarray:
        """Project (D,) or (N, D) patch vectors to whitened features."""
        return ((patches - self.mean) @ self.components.T) / self.scale

    def reconstruct(self, feats: np.ndarray) -> np.ndarray:
        """Least-squares linear decode of features back to patch space."""
        return (feats * self.scale) @ self.components + self.mean


def train_patch_projection(
    patch_vectors: np.ndarray, n_features: int, pool: int
) -> PatchProjection:
    """PCA projection of pooled patch vectors to n_features whitened values."""
    n, d = patch_vectors.shape
    if n_features > d:
        raise ValueError("more features requested than patch dimensions")
    mean = patch_vectors.mean(axis=0)
    centered = patch_vectors - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_features]
    # Fix sign: largest-magnitude entry of each component is positive.
    flips = np.sign(comps[np.arange(n_features), np.argmax(np.abs(comps), axis=1)])
    flips[flips == 0] = 1.0
    comps = comps * flips[:, None]
    scale = svals[:n_features] / math.sqrt(max(n - 1, 1))
    scale = np.where(scale > 1e-12, scale, 1.0)
    return PatchProjection(pool=pool, mean=mean, components=comps, scale=scale)


# ---------------------------------------------------------------------------
# Codebooks and messages


@dataclass(frozen=True, eq=False)
class Codebook:
    """One quantization level: per-feature codeword tables of shape (F, 2^v, K)."""

    level: int
    codewords: np.ndarray

    def __post_init__(self):
        if self.codewords.ndim != 3:
            raise ValueError("codewords must have shape (F, N, K)")
        if self.codewords.shape[1] != 2**self.level:
            raise ValueError("codeword count must equal 2^level")
        if not np.all(np.isfinite(self.codewords)):
            raise ValueError("codewords must be finite")

    @property
    def n_features(self) -> int:
        return self.codewords.shape[0]

    @property
    def codeword_dim(self) -> int:
        return self.codewords.shape[2]


@dataclass(frozen=True, eq=False)
class CodebookEnsemble:
    """Trained codebooks for levels 1..V; level 0 is the null (no-transmit) action."""

    books: tuple[Codebook, ...]

    def __post_init__(self):
        if not self.books:
            raise ValueError("ensemble needs at least one codebook")
        levels = [b.level for b in self.books]
        if levels != sorted(set(levels)) or any(l < 1 for l in levels):
            raise ValueError("levels must be strictly increasing and >= 1")
        shapes = {(b.n_features, b.codeword_dim) for b in self.books}
        if len(shapes) > 1:
            raise ValueError("all books must share F and K")

    @property
    def n_features(self) -> int:
        return self.books[0].n_features

    @property
    def codeword_dim(self) -> int:
        return self.books[0].codeword_dim

    @property
    def max_level(self) -> int:
        return self.books[-1].level

    def book(self, level: int) -> Codebook:
        for b in self.books:
            if b.level == level:
                return b
        raise KeyError(f"no codebook for level {level}")


NULL_LEVEL = 0


@dataclass(frozen=True, eq=False)
class Message:
    """Chosen level and, unless null, one codeword index per feature."""

    level: int
    indices: np.ndarray | None = None

    def __post_init__(self):
        if self.level == NULL_LEVEL:
            if self.indices is not None:
                raise ValueError("null message carries no indices")
        else:
            if self.indices is None:
                raise ValueError("non-null message needs indices")
            if np.any(self.indices < 0) or np.any(self.indices >= 2**self.level):
                raise ValueError("codeword index out of range for level")


def message_length_bytes(msg: Message, n_features: int = DEFAULT_FEATURES) -> float:
    """Payload length in bytes: F * level bits / 8; the null message is free."""
    if msg.level == NULL_LEVEL:
        return 0.0
    return n_features * msg.level / 8.0


def encode(features: np.ndarray, book: Codebook) -> Message:
    """Nearest codeword per feature in squared error; ties go to the lowest index."""
    return Message(level=book.level, indices=encode_indices(features[None, ...], book)[0])


def encode_indices(features: np.ndarray, book: Codebook) -> np.ndarray:
    """Batched nearest-codeword indices: (B, F[, K]) -> (B, F)."""
    feats = _as_blocks(features, book.n_features, book.codeword_dim)
    diff = feats[:, :, None, :] - book.codewords[None, :, :, :]
    d2 = np.einsum("bfnk,bfnk->bfn", diff, diff)
    return np.argmin(d2, axis=2)


def decode(msg: Message, ensemble: CodebookEnsemble) -> np.ndarray:
    """Per-feature codeword lookup; the null message cannot be decoded."""
    if msg.level == NULL_LEVEL:
        raise ValueError("cannot decode the null message; substitute the null-input token")
    book = ensemble.book(msg.level)
    return decode_indices(msg.indices[None, :], book)[0]


def decode_indices(indices: np.ndarray, book: Codebook) -> np.ndarray:
    """Batched codeword lookup: (B, F) -> (B, F) at K = 1, else (B, F, K)."""
    if np.any(indices < 0) or np.any(indices >= 2**book.level):
        raise ValueError("codeword index out of range for level")
    f_idx = np.arange(book.n_features)
    out = book.codewords[f_idx[None, :], indices, :]
    if book.codeword_dim == 1:
        return out[:, :, 0]
    return out


def _as_blocks(features: np.ndarray, n_features: int, k: int) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2 and k == 1:
        feats = feats[:, :, None]
    if feats.shape[1:] != (n_features, k):
        raise ValueError(f"features must reshape to (B, {n_features}, {k})")
    return feats


# ---------------------------------------------------------------------------
# Codebook training (Lloyd / k-means++)


def train_codebook(
    dataset: np.ndarray,
    level: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    n_init: int = 4,
) -> Codebook:
    """Fit per-feature codebooks with Lloyd's algorithm.

    Deterministic given the rng; runs n_init k-means++ restarts per feature
    and keeps the fit with the lowest quantization MSE. Codewords are sorted
    (by first component) so the stored order is canonical.
    """
    if level < 1:
        raise ValueError("level must be >= 1")
    data = _dataset_blocks(dataset)
    n, n_features, k = data.shape
    n_codes = 2**level
    if n < n_codes:
        raise ValueError(f"dataset has {n} rows; level {level} needs at least {n_codes}")

    codewords = np.empty((n_features, n_codes, k))
    for f in range(n_features):
        best: np.ndarray | None = None
        best_mse = np.inf
        for _ in range(n_init):
            centers, mse = _lloyd(data[:, f, :], n_codes, rng, max_iter)
            if mse < best_mse:
                best, best_mse = centers, mse
        order = np.lexsort(best.T[::-1])
        codewords[f] = best[order]
    return Codebook(level=level, codewords=codewords)


def _dataset_blocks(dataset: np.ndarray) -> np.ndarray:
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ValueError("dataset must have shape (n, F) or (n, F, K)")
    return data


def _lloyd(
    points: np.ndarray, n_codes: int, rng: np.random.Generator, max_iter: int
) -> tuple[np.ndarray, float]:
    """One k-means++ seeded Lloyd run on (n, K) points."""
    centers = _kmeanspp(points, n_codes, rng)
    scalar = points.shape[1] == 1
    x = points[:, 0] if scalar else None
    for _ in range(max_iter):
        if scalar:
            order = np.argsort(centers[:, 0], kind="stable")
            centers = centers[order]
            bounds = 0.5 * (centers[:-1, 0] + centers[1:, 0])
            assign = np.searchsorted(bounds, x)
            counts = np.bincount(assign, minlength=n_codes)
            sums = np.bincount(assign, weights=x, minlength=n_codes)
            new = np.where(counts > 0, sums / np.maximum(counts, 1), centers[:, 0])[:, None]
        else:
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            assign = np.argmin(d2, axis=1)
            counts = np.bincount(assign, minlength=n_codes)
            new = centers.copy()
            for c in np.nonzero(counts > 0)[0]:
                new[c] = points[assign == c].mean(axis=0)
        if np.max(np.abs(new - centers)) < 1e-12:
            centers = new
            break
        centers = new
    mse = float(((points - centers[_assign(points, centers)]) ** 2).sum(axis=1).mean())
    return centers, mse


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _kmeanspp(points: np.ndarray, n_codes: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((n_codes, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, n_codes):
        total = d2.sum()
        if total <= 0:
            raise ValueError(
                f"fewer than {n_codes} distinct values; cannot seed distinct codewords"
            )
        cum = np.cumsum(d2)
        idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        centers[i] = points[idx]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def train_ensemble(
    dataset: np.ndarray,
    rng: np.random.Generator,
    max_level: int = DEFAULT_LEVELS,
    max_iter: int = 100,
    n_init: int = 4,
) -> CodebookEnsemble:
    books = tuple(
        train_codebook(dataset, v, rng, max_iter=max_iter, n_init=n_init)
        for v in range(1, max_level + 1)
    )
    return CodebookEnsemble(books=books)


def quantization_mse(dataset: np.ndarray, book: Codebook) -> np.ndarray:
    """Per-feature mean squared quantization error of a dataset under a book."""
    data = _dataset_blocks(dataset)
    idx = encode_indices(data, book)
    f_idx = np.arange(book.n_features)
    rec = book.codewords[f_idx[None, :], idx, :]
    return ((data - rec) ** 2).sum(axis=2).mean(axis=0)


# ---------------------------------------------------------------------------
# Metrics


def perplexity(usage_counts: np.ndarray) -> float:
    """2 ** H(p) of the empirical codeword frequencies, H in bits."""
    counts = np.asarray(usage_counts, dtype=np.float64).ravel()
    if np.any(counts < 0):
        raise ValueError("usage counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("usage counts must not all be zero")
    p = counts[counts > 0] / total
    entropy_bits = float(-(p * np.log2(p)).sum())
    return 2.0**entropy_bits


def distortion_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference of two equal-length vectors."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ValueError("length mismatch")
    return float(np.mean((av - bv) ** 2))


MSE_FLOOR = 1e-12


def distortion_psnr(o, o_hat, max_value: float = 1.0) -> float:
    """10*log10(MAX^2 / MSE) with the MSE floored at 1e-12.

    Accepts observations (snapshots are stacked) or plain arrays; shapes must
    match. MAX is the dynamic range of the representation: 2.0 for normalized
    vector observations, 1.0 for binary frames.
    """
    a = _obs_array(o)
    b = _obs_array(o_hat)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = max(float(np.mean((a - b) ** 2)), MSE_FLOOR)
    return 10.0 * math.log10(max_value**2 / mse)


def _obs_array(o) -> np.ndarray:
    if isinstance(o, Observation):
        return np.stack([np.asarray(o.previous, dtype=np.float64),
                         np.asarray(o.current, dtype=np.float64)])
    return np.asarray(o, dtype=np.float64)


# ---------------------------------------------------------------------------
# Persistence (versioned little-endian binary)


def save_ensemble(path, ensemble: CodebookEnsemble) -> None:
    """Write magic, version, F, K, V, then per level the (F, 2^v, K) float64 table."""
    levels = [b.level for b in ensemble.books]
    if levels != list(range(1, ensemble.max_level + 1)):
        raise ValueError("persisted ensembles must cover levels 1..V contiguously")
    with open(path, "wb") as fh:
        fh.write(_CODEBOOK_MAGIC)
        fh.write(
            struct.pack(
                "<III I",
                _CODEBOOK_VERSION,
                ensemble.n_features,
                ensemble.codeword_dim,
                ensemble.max_level,
            )
        )
        for book in ensemble.books:
            fh.write(np.ascontiguousarray(book.codewords, dtype="<f8").tobytes())


def load_ensemble(path) -> CodebookEnsemble:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CODEBOOK_MAGIC:
            raise ValueError(f"{path}: not a codebook file")
        version, n_features, k, max_level = struct.unpack("<III I", fh.read(16))
        if version != _CODEBOOK_VERSION:
            raise ValueError(f"{path}: unsupported codebook version {version}")
        books = []
        for v in range(1, max_level + 1):
            count = n_features * 2**v * k
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated codebook file")
            table = np.frombuffer(raw, dtype="<f8").reshape(n_features, 2**v, k)
            books.append(Codebook(level=v, codewords=table.astype(np.float64)))
    return CodebookEnsemble(books=tuple(books))


def save_projection(path, proj: PatchProjection) -> None:
    with open(path, "wb") as fh:
        fh.write(_PROJECTION_MAGIC)
        n_feat, d = proj.components.shape
        fh.write(struct.pack("<IIII", _PROJECTION_VERSION, proj.pool, n_feat, d))
        fh.write(np.ascontiguousarray(proj.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(proj.components, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(proj.scale, dtype="<f8").tobytes())


def load_projection(path) -> PatchProjection:
    with open(path, "rb") as fh:
        if fh.read(4) != _PROJECTION_MAGIC:
            raise ValueError(f"{path}: not a projection file")
        version, pool, n_feat, d = struct.unpack("<IIII", fh.read(16))
        if version != _PROJECTION_VERSION:
            raise ValueError(f"{path}: unsupported projection version {version}")
        mean = np.frombuffer(fh.read(d * 8), dtype="<f8").astype(np.float64)
        comps = np.frombuffer(fh.read(n_feat * d * 8), dtype="<f8").reshape(n_feat, d)
        scale = np.frombuffer(fh.read(n_feat * 8), dtype="<f8").astype(np.float64)
    return PatchProjection(pool=pool, mean=mean, components=comps.astype(np.float64), scale=scale)
