"""Euclidean projection onto the capped unit simplex {z : sum(z) <= 1, z >= 0}."""

from __future__ import annotations

import numpy as np

__all__ = ["project_capped_simplex"]


def project_capped_simplex(v) -> np.ndarray:
    """Closest point of {z : sum(z) <= 1, z >= 0} to v in the Euclidean norm.

    If clipping the negative entries already lands under the cap, that is the
    projection. Otherwise the cap constraint is tight and the problem reduces
    to the classical sort-and-threshold projection onto the unit simplex:
    theta is the smallest shift such that sum(max(v - theta, 0)) = 1.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a nonempty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("entries must be finite")
    clipped = np.maximum(v, 0.0)
    if clipped.sum() <= 1.0:
        return clipped
    u = np.sort(v)[::-1]
    theta = (np.cumsum(u) - 1.0) / np.arange(1, v.size + 1)
    k = int(np.nonzero(u - theta > 0.0)[0][-1])
    return np.maximum(v - theta[k], 0.0)
