"""Deterministic numeric kernels shared by every stage of the pipeline.

All randomness in the package flows through generators built here, so a
single root seed reproduces a whole run bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "softmax",
    "top_k_indices",
    "pairwise_sq_dist",
    "make_rng",
    "derive_seed",
    "draw_seed",
]

_U64 = np.uint64


def softmax(scores: np.ndarray) -> np.ndarray:
    """Stable softmax of a non-empty 1-D score array."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("softmax expects a non-empty 1-D array")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax scores must be finite")
    z = np.exp(s - s.max())
    return z / z.sum()


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, in descending score order.

    Ties resolve to the lower index first, so the selection is
    deterministic regardless of platform.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("top_k_indices expects a 1-D array")
    if not 1 <= k <= s.size:
        raise ValueError(f"k must be in [1, {s.size}], got {k}")
    # Stable sort on the negated scores keeps equal scores in index order.
    order = np.argsort(-s, kind="stable")
    return order[:k]


def pairwise_sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (n, k) for (n, d) x (k, d) inputs.

    Computed from explicit differences rather than the expanded dot-product
    form, so an entry is exactly 0.0 when a point equals a center.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if p.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: {p.shape[1]} vs {c.shape[1]}")
    diff = p[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a 64-bit seed; same seed, same stream."""
    return np.random.default_rng(_U64(seed & 0xFFFFFFFFFFFFFFFF))


def derive_seed(root: int, purpose: str) -> int:
    """Stable 64-bit sub-seed for (root, purpose), independent of platform.

    Hashing keeps sub-streams for different purposes (scene synthesis,
    detection, benchmarks) decorrelated even for adjacent root seeds.
    """
    digest = hashlib.sha256(f"{root}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def draw_seed(rng: np.random.Generator) -> int:
    """One 64-bit seed drawn from an existing generator."""
    return int(rng.integers(0, 2**64, dtype=_U64))
