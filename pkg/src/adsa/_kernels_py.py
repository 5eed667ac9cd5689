"""Pure numpy versions of the compiled kernels in ``_kernels_c.pyx``."""

import numpy as np

DEGENERATE_NORM = 1e-12


def similarity(values):
    """Pairwise cosine matrix, per-row average and degenerate mask.

    The diagonal and every row/column of a near-zero vector are 0. The
    matrix is built from its strict upper triangle so it is exactly
    symmetric.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = values.shape[0]
    norms = np.sqrt(np.einsum("ij,ij->i", values, values))
    deg = norms < DEGENERATE_NORM
    safe = np.where(deg, 1.0, norms)
    S = (values @ values.T) / np.outer(safe, safe)
    S[deg, :] = 0.0
    S[:, deg] = 0.0
    S = np.triu(np.clip(S, -1.0, 1.0), k=1)
    S = S + S.T
    if n >= 2:
        avg = S.sum(axis=1) / (n - 1)
    else:
        avg = np.zeros(n)
    return S, avg, deg


def attend(q, keys, vals):
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] == 0:
        raise ValueError("attention over an empty context")
    scores = keys @ np.asarray(q, dtype=np.float64) / np.sqrt(keys.shape[1])
    w = np.exp(scores - scores.max())
    w /= w.sum()
    return w @ np.asarray(vals, dtype=np.float64), w


def rope(x, pos, theta_base):
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    i = np.arange(d // 2)
    angle = pos * np.power(theta_base, -2.0 * i / d)
    c, s = np.cos(angle), np.sin(angle)
    a, b = x[0::2], x[1::2]
    out = np.empty(d)
    out[0::2] = a * c - b * s
    out[1::2] = a * s + b * c
    return out
