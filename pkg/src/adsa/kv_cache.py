"""Three-region KV cache with value-similarity selection and eviction.

A cache at step t is split by position into

* ``prefix``: the first ``n_prefix`` entries,
* ``local``: the ``m_local`` most recent entries,
* ``previous``: everything in between.

Only the previous region is filtered. For attention the ``k_select``
previous entries with the lowest average value cosine similarity are kept
(the most diverse ones). When the cache is full, the previous entry with the
highest average similarity (the most redundant one) is evicted before the
new entry is appended.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels

VARIANTS = ("dense", "window", "window_prefix", "adsa")

# Averages within this distance of the maximum count as tied for eviction;
# the smallest position among them is evicted.
EVICTION_TIE_TOL = 1e-12

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class CachePolicy:
    """Region sizes, capacity and attention variant for one cache.

    ``k_select`` is only read by the ``adsa`` variant. ``shared_selection``
    makes all heads of a layer share one selection/eviction decision
    (averaged similarity scores) instead of deciding per head.
    """

    n_prefix: int = 0
    m_local: int = 0
    k_select: int = 0
    capacity: int = 1024
    variant: str = "dense"
    shared_selection: bool = False
    name: Optional[str] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for fld in ("n_prefix", "m_local", "k_select"):
            if getattr(self, fld) < 0:
                raise ValueError(f"{fld} must be non-negative")
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if self.n_prefix >= self.capacity:
            raise ValueError("n_prefix must be smaller than capacity")
        if self.n_prefix + self.m_local > self.capacity:
            raise ValueError("n_prefix + m_local exceeds capacity")
        if self.variant in ("window", "window_prefix") and self.m_local < 1:
            raise ValueError(f"variant {self.variant} needs m_local >= 1")
        if self.variant == "adsa" and self.n_prefix + self.k_select + self.m_local > self.capacity:
            raise ValueError("n_prefix + k_select + m_local exceeds capacity")

    @property
    def label(self) -> str:
        return self.name or self.variant

    @property
    def context_budget(self) -> int:
        """Largest effective context this policy can produce."""
        if self.variant == "dense":
            return self.capacity
        if self.variant == "window":
            return self.m_local
        if self.variant == "window_prefix":
            return self.n_prefix + self.m_local
        return self.n_prefix + self.k_select + self.m_local

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CachePolicy":
        return cls(**d)


@dataclass(eq=False)
class KvEntry:
    key: np.ndarray
    value: np.ndarray
    position: int
    step: int = 0


@dataclass
class RegionView:
    prefix: list
    previous: list
    local: list


@dataclass
class SimilarityStats:
    S: np.ndarray
    avg: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.avg), dtype=bool)


class KvCache:
    """Fixed-capacity store of post-rotation keys and values for one head.

    Entries are kept sorted by position in preallocated arrays; rows
    ``[0, occupancy)`` are live.
    """

    def __init__(self, capacity: int, head_dim: int):
        if capacity < 1 or head_dim < 1:
            raise ValueError("capacity and head_dim must be positive")
        self.capacity = capacity
        self.head_dim = head_dim
        self.keys = np.zeros((capacity, head_dim))
        self.values = np.zeros((capacity, head_dim))
        self.positions = np.zeros(capacity, dtype=np.int64)
        self.steps = np.zeros(capacity, dtype=np.int64)
        self.occupancy = 0

    @classmethod
    def for_policy(cls, policy: CachePolicy, head_dim: int) -> "KvCache":
        return cls(policy.capacity, head_dim)

    def __len__(self):
        return self.occupancy

    @property
    def last_position(self) -> int:
        return int(self.positions[self.occupancy - 1]) if self.occupancy else -1

    def live_positions(self) -> np.ndarray:
        return self.positions[: self.occupancy]

    def entry(self, i: int) -> KvEntry:
        if not 0 <= i < self.occupancy:
            raise IndexError(i)
        return KvEntry(
            self.keys[i].copy(), self.values[i].copy(), int(self.positions[i]), int(self.steps[i])
        )

    def entries(self) -> list:
        return [self.entry(i) for i in range(self.occupancy)]

    def append(self, entry: KvEntry) -> None:
        if self.occupancy >= self.capacity:
            raise OverflowError("cache is full")
        if entry.position <= self.last_position:
            raise ValueError(
                f"position {entry.position} is not after last cached position {self.last_position}"
            )
        i = self.occupancy
        self.keys[i] = entry.key
        self.values[i] = entry.value
        self.positions[i] = entry.position
        self.steps[i] = entry.step
        self.occupancy += 1

    def remove(self, i: int) -> int:
        """Drop row ``i``, shifting later rows down. Returns its position."""
        n = self.occupancy
        if not 0 <= i < n:
            raise IndexError(i)
        pos = int(self.positions[i])
        for arr in (self.keys, self.values, self.positions, self.steps):
            arr[i : n - 1] = arr[i + 1 : n].copy()
        self.occupancy -= 1
        return pos


def region_bounds(occupancy: int, policy: CachePolicy) -> tuple:
    """Return ``(prefix_end, local_start)`` row indices.

    The prefix claims entries first; the local window takes the last
    ``m_local`` of what remains.
    """
    p_end = min(policy.n_prefix, occupancy)
    n_local = min(policy.m_local, occupancy - p_end)
    return p_end, occupancy - n_local


def partition(cache: KvCache, policy: CachePolicy) -> RegionView:
    entries = cache.entries()
    p_end, l_start = region_bounds(len(entries), policy)
    return RegionView(entries[:p_end], entries[p_end:l_start], entries[l_start:])


def _values_of(previous) -> np.ndarray:
    if isinstance(previous, np.ndarray):
        return np.ascontiguousarray(previous, dtype=np.float64)
    previous = list(previous)
    if not previous:
        return np.zeros((0, 0))
    if isinstance(previous[0], KvEntry):
        return np.ascontiguousarray(np.stack([e.value for e in previous]), dtype=np.float64)
    return np.ascontiguousarray(previous, dtype=np.float64)


def similarity_stats(previous) -> SimilarityStats:
    """Pairwise value cosines ``S`` (zero diagonal) and row averages.

    ``previous`` is a sequence of :class:`KvEntry` or a 2-d array whose rows
    are value vectors. Averages divide by ``L - 1``; with fewer than two rows
    they are all zero.
    """
    values = _values_of(previous)
    L = values.shape[0]
    if L < 2:
        deg = np.array([np.sqrt(values[i] @ values[i]) < 1e-12 for i in range(L)], dtype=bool)
        return SimilarityStats(np.zeros((L, L)), np.zeros(L), deg)
    S, avg, deg = kernels.similarity(values)
    return SimilarityStats(S, avg, deg)


def _positions_of(previous, n: int) -> np.ndarray:
    if isinstance(previous, np.ndarray) or previous is None:
        return np.arange(n)
    previous = list(previous)
    if previous and isinstance(previous[0], KvEntry):
        return np.array([e.position for e in previous])
    return np.arange(n)


def topk_select(previous, stats: SimilarityStats, k: int) -> np.ndarray:
    """Indices (into ``previous``) of the ``k`` lowest average similarities.

    The objective is a sum of per-token scores, so the best subset is the
    ``k`` smallest averages; ties go to the smaller position. The result is
    in ascending position order.
    """
    avg = np.asarray(stats.avg)
    L = avg.shape[0]
    if not 0 <= k <= L:
        raise ValueError(f"k={k} outside [0, {L}]")
    pos = _positions_of(previous, L)
    order = np.lexsort((pos, avg))[:k]
    return order[np.argsort(pos[order], kind="stable")]


def select_lowest(avg: np.ndarray, k: int) -> np.ndarray:
    """``topk_select`` for rows already in position order."""
    if k >= avg.shape[0]:
        return np.arange(avg.shape[0])
    return np.sort(np.argsort(avg, kind="stable")[:k])


def most_redundant(avg: np.ndarray) -> int:
    """Row with the highest average similarity; ties go to the smaller row."""
    mx = avg.max()
    return int(np.flatnonzero(avg >= mx - EVICTION_TIE_TOL)[0])


def previous_values(cache: KvCache, policy: CachePolicy) -> np.ndarray:
    p_end, l_start = region_bounds(cache.occupancy, policy)
    return cache.values[p_end:l_start]


def context_indices(cache: KvCache, policy: CachePolicy, avg: Optional[np.ndarray] = None) -> np.ndarray:
    """Row indices of the effective attention context, ascending.

    ``avg`` overrides the previous-region similarity averages (used for
    shared selection across heads).
    """
    occ = cache.occupancy
    if policy.variant == "dense":
        return np.arange(occ)
    if policy.variant == "window":
        return np.arange(max(0, occ - policy.m_local), occ)
    p_end, l_start = region_bounds(occ, policy)
    head = np.arange(p_end)
    tail = np.arange(l_start, occ)
    if policy.variant == "window_prefix":
        return np.concatenate([head, tail])
    L = l_start - p_end
    k = min(policy.k_select, L)
    if k == L:
        mid = np.arange(p_end, l_start)
    elif k == 0:
        mid = np.arange(0)
    else:
        if avg is None:
            avg = similarity_stats(cache.values[p_end:l_start]).avg
        mid = p_end + select_lowest(avg, k)
    return np.concatenate([head, mid, tail])


def effective_context(cache: KvCache, policy: CachePolicy) -> list:
    return [cache.entry(int(i)) for i in context_indices(cache, policy)]


def eviction_index(cache: KvCache, policy: CachePolicy, avg: Optional[np.ndarray] = None) -> int:
    """Row that would be evicted from a full cache.

    The most redundant previous-region entry. When the previous region is
    empty the oldest local entry goes instead (sliding-window behaviour).
    """
    p_end, l_start = region_bounds(cache.occupancy, policy)
    if l_start > p_end:
        if l_start - p_end == 1:
            return p_end
        if avg is None:
            avg = similarity_stats(cache.values[p_end:l_start]).avg
        return p_end + most_redundant(avg)
    return l_start


def insert_with_eviction(
    cache: KvCache, entry: KvEntry, policy: CachePolicy, avg: Optional[np.ndarray] = None
) -> Optional[int]:
    """Append ``entry``, evicting one entry first if the cache is full.

    Returns the evicted position, or ``None``. Prefix and local entries are
    never evicted while the previous region is nonempty.
    """
    if entry.position <= cache.last_position:
        raise ValueError(
            f"out-of-order insert: position {entry.position} after {cache.last_position}"
        )
    evicted = None
    if cache.occupancy >= min(cache.capacity, policy.capacity):
        evicted = cache.remove(eviction_index(cache, policy, avg))
    cache.append(entry)
    return evicted


class Archive:
    """Host-side append-only record of every generated token."""

    def __init__(self):
        self.positions: list = []
        self.tokens: list = []

    def __len__(self):
        return len(self.tokens)

    def append(self, position: int, token_id: int) -> int:
        if self.positions and position <= self.positions[-1]:
            raise ValueError(f"archive position {position} not after {self.positions[-1]}")
        self.positions.append(int(position))
        self.tokens.append(int(token_id))
        return len(self.tokens)


def archive_append(archive: Archive, position: int, token_id: int) -> int:
    return archive.append(position, token_id)


def memory_footprint(
    cache: Union[KvCache, int],
    head_dim: Optional[int] = None,
    *,
    bytes_per_scalar: int = 2,
    n_layers: int = 1,
    n_heads: int = 1,
) -> int:
    """Accounted KV bytes: ``occupancy * 2 * head_dim * bytes * layers * heads``.

    ``cache`` is a :class:`KvCache` or a bare occupancy count. The default
    2 bytes per scalar models fp16 storage, independent of the float64
    arrays used here.
    """
    if isinstance(cache, KvCache):
        occupancy = cache.occupancy
        head_dim = cache.head_dim if head_dim is None else head_dim
    else:
        occupancy = int(cache)
    if head_dim is None:
        raise ValueError("head_dim is required with a bare occupancy")
    return occupancy * 2 * head_dim * bytes_per_scalar * n_layers * n_heads


def snapshot(cache: KvCache, policy: CachePolicy) -> dict:
    """JSON-ready dict of the live entries and the policy."""
    return {
        "version": SNAPSHOT_VERSION,
        "policy": policy.to_dict(),
        "capacity": cache.capacity,
        "head_dim": cache.head_dim,
        "entries": [
            {
                "position": int(cache.positions[i]),
                "step": int(cache.steps[i]),
                "key": cache.keys[i].tolist(),
                "value": cache.values[i].tolist(),
            }
            for i in range(cache.occupancy)
        ],
    }


def restore(data: dict) -> tuple:
    """Inverse of :func:`snapshot`; returns ``(cache, policy)``."""
    if data.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {data.get('version')!r}")
    policy = CachePolicy.from_dict(data["policy"])
    cache = KvCache(data["capacity"], data["head_dim"])
    for e in data["entries"]:
        cache.append(KvEntry(np.array(e["key"]), np.array(e["value"]), e["position"], e["step"]))
    return cache, policy


def dumps(cache: KvCache, policy: CachePolicy) -> str:
    return json.dumps(snapshot(cache, policy), sort_keys=True)


def loads(text: str) -> tuple:
    return restore(json.loads(text))
