"""Flat-kernel mean-shift clustering and a deterministic text embedder.

The embedder maps text to L2-normalized bag-of-character-trigram vectors via
a stable hash (md5), so identical inputs produce identical vectors on every
platform and run. It stands behind the same interface a learned sentence
encoder would use; the downstream entropy math does not care which one is
plugged in.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from degenlab.errors import ContractViolation, EmptyInput

__all__ = ["ClusterAssignment", "mean_shift", "trigram_embed"]

MAX_ITERATIONS = 300
# Convergence threshold scales with the kernel radius.
EPS_FRACTION = 1e-4


@dataclass
class ClusterAssignment:
    """member_id -> cluster_id; every member belongs to exactly one cluster."""

    members: dict

    @property
    def cluster_ids(self) -> set[int]:
        return set(self.members.values())

    def __len__(self) -> int:
        return len(self.members)


def trigram_embed(texts: list[str], dim: int = 64) -> np.ndarray:
    """Hash character trigrams of each text into a normalized count vector."""
    if dim < 1:
        raise ContractViolation("trigram_embed: dim must be >= 1")
    out = np.zeros((len(texts), dim))
    for row, text in enumerate(texts):
        padded = f" {text} "
        for i in range(len(padded) - 2):
            tri = padded[i:i + 3].encode("utf-8")
            bucket = int.from_bytes(hashlib.md5(tri).digest()[:8], "big") % dim
            out[row, bucket] += 1.0
        norm = np.linalg.norm(out[row])
        if norm > 0:
            out[row] /= norm
    return out


def mean_shift(points, bandwidth: float, ids=None, max_iter: int = MAX_ITERATIONS) -> ClusterAssignment:
    """Flat-kernel mean shift: each point iterates to the mean of the original
    points within ``bandwidth`` until its shift drops below 1e-4 * bandwidth;
    converged modes closer than bandwidth/2 merge into one cluster.

    The result is invariant to input order: every trajectory depends only on
    the point itself and the (order-free) point set, and mode merging walks
    modes in lexicographic order.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n == 0:
        raise EmptyInput("mean_shift: no points")
    if bandwidth <= 0:
        raise ContractViolation("mean_shift: bandwidth must be positive")
    if ids is None:
        ids = list(range(n))
    elif len(ids) != n:
        raise ContractViolation("mean_shift: ids length must match points")

    eps = EPS_FRACTION * bandwidth
    modes = X.copy()
    for _ in range(max_iter):
        # Pairwise distances from current modes to the *original* points.
        diff = modes[:, None, :] - X[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        neighbor = dist <= bandwidth
        counts = neighbor.sum(axis=1)
        new_modes = (neighbor[:, :, None] * X[None, :, :]).sum(axis=1) / counts[:, None]
        shift = np.sqrt(((new_modes - modes) ** 2).sum(axis=-1)).max()
        modes = new_modes
        if shift < eps:
            break

    # Merge modes closer than bandwidth/2, visiting them in lexicographic
    # order so cluster identity does not depend on input order.
    order = np.lexsort(modes.T[::-1])
    centers: list[np.ndarray] = []
    center_of_point = np.full(n, -1, dtype=np.int64)
    for idx in order:
        mode = modes[idx]
        assigned = -1
        for ci, center in enumerate(centers):
            if np.linalg.norm(mode - center) < bandwidth / 2.0:
                assigned = ci
                break
        if assigned < 0:
            centers.append(mode)
            assigned = len(centers) - 1
        center_of_point[idx] = assigned

    return ClusterAssignment({ids[i]: int(center_of_point[i]) for i in range(n)})
