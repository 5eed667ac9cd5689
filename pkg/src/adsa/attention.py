"""Dense, window, window+prefix and ADSA attention as one single-step call."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .kv_cache import CachePolicy, KvCache, context_indices


@dataclass
class AttentionStep:
    output: np.ndarray
    context_len: int
    used_positions: np.ndarray
    weights: Optional[np.ndarray] = None

    def record(self, q_position: int) -> dict:
        """Weight-capture record for locality analysis."""
        return {
            "q_position": int(q_position),
            "used_positions": self.used_positions.tolist(),
            "weights": None if self.weights is None else self.weights.tolist(),
        }


def attend(
    q,
    q_position: int,
    cache: KvCache,
    policy: CachePolicy,
    capture: bool = False,
    avg: Optional[np.ndarray] = None,
    indices: Optional[np.ndarray] = None,
) -> AttentionStep:
    """Attend ``q`` (already rotated at ``q_position``) over the policy's context.

    The query's own entry may be in the cache; anything after
    ``q_position`` is a causality violation. ``indices`` bypasses context
    selection (callers that already computed it), ``avg`` overrides the
    previous-region scores.
    """
    if cache.occupancy == 0:
        raise ValueError("attend on an empty cache")
    if cache.last_position > q_position:
        raise ValueError(
            f"cache holds position {cache.last_position} beyond query position {q_position}"
        )
    idx = context_indices(cache, policy, avg) if indices is None else indices
    if idx.shape[0] == 0:
        raise ValueError(f"policy {policy.label} produced an empty context")
    keys = cache.keys[idx]
    vals = cache.values[idx]
    out, w = kernels.attend(np.ascontiguousarray(q, dtype=np.float64), keys, vals)
    return AttentionStep(
        output=out,
        context_len=int(idx.shape[0]),
        used_positions=cache.positions[idx].copy(),
        weights=w if capture else None,
    )
