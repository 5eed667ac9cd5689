"""Deterministic toy decoder-only transformer driven through a cache policy.

Architecture per layer (pre-norm, no biases, unit RMSNorm gains)::

    h = rmsnorm(x);  q, k, v = h Wq, h Wk, h Wv        split into heads
    q, k <- rope(q, t), rope(k, t)
    x += concat_h(attend(q_h, cache_h)) Wo
    x += gelu(rmsnorm(x) W1) W2
    logits = rmsnorm(x) Wout

Weights come from one :class:`adsa.rng.LcgGaussian` stream seeded with
``config.seed``, filled row-major in this order: ``embed`` (vocab, d) with
std 1; per layer ``wq, wk, wv, wo`` (d, d), ``w1`` (d, d_ff) each with std
1/sqrt(d) and ``w2`` (d_ff, d) with std 1/sqrt(d_ff); then ``unembed``
(d, vocab) with std 1/sqrt(d).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import core_math
from .attention import attend
from .kv_cache import (
    Archive,
    CachePolicy,
    KvCache,
    KvEntry,
    context_indices,
    insert_with_eviction,
    memory_footprint,
    region_bounds,
    similarity_stats,
)
from .rng import LcgGaussian, SplitMix64

RMS_EPS = 1e-6
WEIGHT_MAGIC = b"ADSAWTS\x01"
WEIGHT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    seq_capacity: int = 1024
    theta_base: float = core_math.DEFAULT_THETA_BASE
    seed: int = 0
    d_ff: int = 0  # 0 means 4 * d_model

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "seq_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError(f"head dimension {self.head_dim} must be even for rope")
        if self.theta_base <= 0:
            raise ValueError("theta_base must be positive")
        if self.d_ff < 0:
            raise ValueError("d_ff must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def weight_shapes(config: ModelConfig) -> list:
    """``(name, shape, std)`` for every tensor, in stream order."""
    d, f, V = config.d_model, config.ff_dim, config.vocab_size
    out = [("embed", (V, d), 1.0)]
    for l in range(config.n_layers):
        for nm in ("wq", "wk", "wv", "wo"):
            out.append((f"layers.{l}.{nm}", (d, d), 1.0 / math.sqrt(d)))
        out.append((f"layers.{l}.w1", (d, f), 1.0 / math.sqrt(d)))
        out.append((f"layers.{l}.w2", (f, d), 1.0 / math.sqrt(f)))
    out.append(("unembed", (d, V), 1.0 / math.sqrt(d)))
    return out


class Model:
    """Immutable weights plus config. Safe to share across runs."""

    def __init__(self, config: ModelConfig, weights: dict):
        self.config = config
        self.weights = weights
        for name, shape, _ in weight_shapes(config):
            if weights[name].shape != shape:
                raise ValueError(f"weight {name} has shape {weights[name].shape}, expected {shape}")
            weights[name].setflags(write=False)
        self._layers = []
        for l in range(config.n_layers):
            p = f"layers.{l}."
            self._layers.append({k[len(p):]: v for k, v in weights.items() if k.startswith(p)})

    def layer(self, l: int) -> dict:
        return self._layers[l]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())


def init_model(config: ModelConfig) -> Model:
    shapes = weight_shapes(config)
    total = sum(int(np.prod(s)) for _, s, _ in shapes)
    stream = np.array(LcgGaussian(config.seed).normals(total))
    weights = {}
    off = 0
    for name, shape, std in shapes:
        n = int(np.prod(shape))
        weights[name] = (stream[off : off + n] * std).reshape(shape)
        off += n
    return Model(config, weights)


def save_weights(model: Model, path) -> None:
    """Write ``magic | u32 header_len | JSON header | float64 LE tensors``.

    The header lists ``name``, ``shape`` and byte ``offset`` (from the start
    of the data block) for each tensor in stream order, plus the config.
    """
    tensors, off = [], 0
    for name, shape, _ in weight_shapes(model.config):
        tensors.append({"name": name, "shape": list(shape), "offset": off})
        off += int(np.prod(shape)) * 8
    header = json.dumps(
        {
            "version": WEIGHT_FORMAT_VERSION,
            "dtype": "<f8",
            "seed": model.config.seed,
            "config": model.config.to_dict(),
            "tensors": tensors,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name, _, _ in weight_shapes(model.config):
            fh.write(np.ascontiguousarray(model.weights[name], dtype="<f8").tobytes())


def load_weights(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != WEIGHT_MAGIC:
        raise ValueError(f"{path}: not an adsa weight file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    if header.get("version") != WEIGHT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weight file version {header.get('version')}")
    data = raw[12 + hlen :]
    config = ModelConfig.from_dict(header["config"])
    weights = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        buf = data[t["offset"] : t["offset"] + 8 * n]
        weights[t["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(t["shape"])
    return Model(config, weights)


def rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


@dataclass
class StepInfo:
    position: int
    context_lens: np.ndarray  # (layers, heads)
    occupancy: int
    evicted_position: Optional[int]
    records: list = field(default_factory=list)


class DecodeState:
    """Per-run mutable state: one cache per (layer, head) and the next position."""

    def __init__(self, model: Model, policy: CachePolicy):
        cfg = model.config
        self.policy = policy
        self.caches = [
            [KvCache.for_policy(policy, cfg.head_dim) for _ in range(cfg.n_heads)]
            for _ in range(cfg.n_layers)
        ]
        self.position = 0
        self.last: Optional[StepInfo] = None


def _shared_avg(layer_caches: list, policy: CachePolicy) -> Optional[np.ndarray]:
    """Head-averaged previous-region similarity for one layer."""
    c0 = layer_caches[0]
    p_end, l_start = region_bounds(c0.occupancy, policy)
    if l_start - p_end < 2:
        return None
    return np.mean(
        [similarity_stats(c.values[p_end:l_start]).avg for c in layer_caches], axis=0
    )


def decode_step(
    model: Model, token_id: int, state: DecodeState, policy: Optional[CachePolicy] = None, capture: bool = False
) -> np.ndarray:
    """Process one token at ``state.position`` and return next-token logits."""
    cfg = model.config
    policy = policy or state.policy
    if not 0 <= token_id < cfg.vocab_size:
        raise ValueError(f"token {token_id} outside vocabulary of {cfg.vocab_size}")
    t = state.position
    H, hd = cfg.n_heads, cfg.head_dim
    x = model.weights["embed"][token_id].copy()
    ctx = np.zeros((cfg.n_layers, H), dtype=np.int64)
    evicted = None
    records = []
    for l in range(cfg.n_layers):
        w = model.layer(l)
        caches = state.caches[l]
        h = rmsnorm(x)
        q = (h @ w["wq"]).reshape(H, hd)
        k = (h @ w["wk"]).reshape(H, hd)
        v = (h @ w["wv"]).reshape(H, hd)
        shared = policy.shared_selection and policy.variant == "adsa"
        avg = None
        if shared and caches[0].occupancy >= policy.capacity:
            avg = _shared_avg(caches, policy)
        outs = []
        for hh in range(H):
            entry = KvEntry(core_math.rope_rotate(k[hh], t, cfg.theta_base), v[hh].copy(), t, t)
            ev = insert_with_eviction(caches[hh], entry, policy, avg)
            if l == 0 and hh == 0:
                evicted = ev
        sel_avg = _shared_avg(caches, policy) if shared else None
        for hh in range(H):
            qr = core_math.rope_rotate(q[hh], t, cfg.theta_base)
            idx = context_indices(caches[hh], policy, sel_avg)
            step = attend(qr, t, caches[hh], policy, capture=capture, indices=idx)
            ctx[l, hh] = step.context_len
            outs.append(step.output)
            if capture:
                rec = step.record(t)
                rec.update(layer=l, head=hh)
                records.append(rec)
        x = x + np.concatenate(outs) @ w["wo"]
        x = x + gelu(rmsnorm(x) @ w["w1"]) @ w["w2"]
    logits = rmsnorm(x) @ model.weights["unembed"]
    occ = {c.occupancy for layer in state.caches for c in layer}
    if len(occ) != 1:
        raise RuntimeError(f"cache occupancies diverged: {sorted(occ)}")
    state.last = StepInfo(t, ctx, occ.pop(), evicted, records)
    state.position += 1
    return logits


def _rope_all(x: np.ndarray, theta_base: float) -> np.ndarray:
    """Rotate rows of ``x`` (T, H, hd) at positions 0..T-1."""
    T, _, hd = x.shape
    inv = theta_base ** (-2.0 * np.arange(hd // 2) / hd)
    ang = np.arange(T)[:, None] * inv[None, :]
    c, s = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]
    a, b = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = a * c - b * s
    out[..., 1::2] = a * s + b * c
    return out


def forward_full(model: Model, tokens: Sequence[int]) -> np.ndarray:
    """Uncached causal forward over the whole sequence; ``(T, vocab)`` logits."""
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    T, H, hd = tokens.shape[0], cfg.n_heads, cfg.head_dim
    x = model.weights["embed"][tokens].copy()
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    for l in range(cfg.n_layers):
        w = model.layer(l)
        h = rmsnorm(x)
        q = _rope_all((h @ w["wq"]).reshape(T, H, hd), cfg.theta_base)
        k = _rope_all((h @ w["wk"]).reshape(T, H, hd), cfg.theta_base)
        v = (h @ w["wv"]).reshape(T, H, hd)
        scores = np.einsum("thd,shd->hts", q, k) / math.sqrt(hd)
        scores[:, mask] = -np.inf
        p = np.exp(scores - scores.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        att = np.einsum("hts,shd->thd", p, v).reshape(T, cfg.d_model)
        x = x + att @ w["wo"]
        x = x + gelu(rmsnorm(x) @ w["w1"]) @ w["w2"]
    return rmsnorm(x) @ model.weights["unembed"]


@dataclass
class DecodeTrace:
    step: int
    position: int
    context_min: int
    context_mean: float
    context_max: int
    cache_occupancy: int
    accounted_bytes: int
    evicted_position: Optional[int]
    sampled_token: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationRun:
    tokens: list
    trace: list
    policy: CachePolicy
    seed: int
    model_seed: int = 0
    temperature: float = 0.0
    archive: Optional[Archive] = None
    logits: Optional[list] = None
    weight_records: Optional[list] = None

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "trace": [t.to_dict() for t in self.trace],
            "policy": self.policy.to_dict(),
            "seed": self.seed,
            "model_seed": self.model_seed,
            "temperature": self.temperature,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def sample_token(logits: np.ndarray, temperature: float, u: float) -> int:
    """Greedy when ``temperature == 0``; else inverse-CDF draw with uniform ``u``."""
    if temperature == 0:
        return int(np.argmax(logits))
    p = core_math.softmax(np.asarray(logits) / temperature)
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(p) - 1))


def generate(
    model: Model,
    prompt: Sequence[int],
    length: int,
    policy: CachePolicy,
    sample_seed: int = 0,
    temperature: float = 0.0,
    *,
    capture: bool = False,
    keep_logits: bool = False,
    forced: Optional[Sequence[int]] = None,
    bytes_per_scalar: int = 2,
) -> GenerationRun:
    """Autoregressively produce ``length`` tokens after ``prompt``.

    Every prompt token is fed; each generated token except the last is fed
    back, so ``len(prompt) + length - 1`` positions are processed. Token
    ``i`` uses the ``i``-th SplitMix64 draw whether or not it is sampled;
    ``forced`` tokens replace the first ``len(forced)`` samples.
    """
    cfg = model.config
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must hold at least one token")
    if length < 1:
        raise ValueError("length must be positive")
    positions = len(prompt) + length - 1
    if positions > cfg.seq_capacity:
        raise ValueError(f"{positions} positions exceed seq_capacity {cfg.seq_capacity}")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    state = DecodeState(model, policy)
    archive = Archive()
    for i, tok in enumerate(prompt):
        archive.append(i, tok)
    for tok in prompt[:-1]:
        decode_step(model, tok, state, policy)
    rng = SplitMix64(sample_seed)
    tokens, trace, all_logits, records = [], [], [], []
    cur = prompt[-1]
    for i in range(length):
        logits = decode_step(model, cur, state, policy, capture=capture)
        u = rng.uniform()
        if forced is not None and i < len(forced):
            tok = int(forced[i])
        else:
            tok = sample_token(logits, temperature, u)
        info = state.last
        archive.append(len(prompt) + i, tok)
        trace.append(
            DecodeTrace(
                step=i,
                position=info.position,
                context_min=int(info.context_lens.min()),
                context_mean=float(info.context_lens.mean()),
                context_max=int(info.context_lens.max()),
                cache_occupancy=info.occupancy,
                accounted_bytes=memory_footprint(
                    info.occupancy,
                    cfg.head_dim,
                    bytes_per_scalar=bytes_per_scalar,
                    n_layers=cfg.n_layers,
                    n_heads=cfg.n_heads,
                ),
                evicted_position=info.evicted_position,
                sampled_token=tok,
            )
        )
        if keep_logits:
            all_logits.append(logits)
        if capture:
            for r in info.records:
                r["step"] = i
            records.extend(info.records)
        tokens.append(tok)
        cur = tok
    return GenerationRun(
        tokens=tokens,
        trace=trace,
        policy=policy,
        seed=sample_seed,
        model_seed=cfg.seed,
        temperature=temperature,
        archive=archive,
        logits=all_logits if keep_logits else None,
        weight_records=records if capture else None,
    )


def fixed_head_length(fixed_fraction: float, length: int) -> int:
    if not 0 < fixed_fraction < 1:
        raise ValueError("fixed_fraction must lie strictly between 0 and 1")
    # round first so 0.05 * 100 counts as 5, not 5.000000000000001
    return math.ceil(round(fixed_fraction * length, 9))


def fix_prefix_generate(
    model: Model,
    prompt: Sequence[int],
    length: int,
    policy: CachePolicy,
    fixed_fraction: float,
    seeds: Sequence[int],
    temperature: float = 1.0,
    reference_seed: Optional[int] = None,
) -> list:
    """Runs that share the first ``ceil(fixed_fraction * length)`` tokens.

    The shared head comes from a reference run sampled with
    ``reference_seed`` (default ``seeds[0]``); each seed then samples the
    remainder.
    """
    head = fixed_head_length(fixed_fraction, length)
    ref_seed = seeds[0] if reference_seed is None else reference_seed
    ref = generate(model, prompt, length, policy, ref_seed, temperature)
    return [
        generate(model, prompt, length, policy, s, temperature, forced=ref.tokens[:head])
        for s in seeds
    ]
