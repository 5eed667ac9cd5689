"""Small deterministic numeric kernel used by the cache and the toy model.

Everything accumulates in float64. The heavy paths (``rope_rotate`` and
``attend_single``) dispatch to :mod:`adsa.kernels`.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels

DEGENERATE_NORM = 1e-12
DEFAULT_THETA_BASE = 10000.0


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``.

    A vector with norm below ``DEGENERATE_NORM`` is treated as degenerate
    and has similarity 0 to everything (see :func:`is_degenerate`).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return 0.0
    s = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, s))


def is_degenerate(v) -> bool:
    v = np.asarray(v, dtype=np.float64)
    return math.sqrt(float(v @ v)) < DEGENERATE_NORM


def softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("softmax needs a nonempty 1-d score vector")
    e = np.exp(scores - scores.max())
    return e / e.sum()


def rope_rotate(x, pos: int, theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """Rotate consecutive pairs of ``x`` by ``pos * theta_base**(-2i/d)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] % 2:
        raise ValueError(f"rope needs an even-length vector, got shape {x.shape}")
    if pos < 0:
        raise ValueError("position must be non-negative")
    if theta_base <= 0:
        raise ValueError("theta_base must be positive")
    return kernels.rope(x, int(pos), float(theta_base))


def attend_single(q, keys, vals, return_weights: bool = False):
    """Scaled dot-product attention of one query over ``keys``/``vals``.

    Returns the output vector, or ``(output, weights)`` when
    ``return_weights`` is set.
    """
    q = np.ascontiguousarray(q, dtype=np.float64)
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("attention needs a nonempty context")
    if vals.shape[0] != keys.shape[0]:
        raise ValueError(f"{keys.shape[0]} keys but {vals.shape[0]} values")
    if keys.shape[1] != q.shape[0]:
        raise ValueError("query and key dimensions differ")
    out, w = kernels.attend(q, keys, vals)
    if return_weights:
        return out, w
    return out
