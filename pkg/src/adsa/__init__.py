"""Adaptive dynamic sparse attention over a three-region KV cache."""

from .attention import AttentionStep, attend
from .core_math import attend_single, cosine_similarity, rope_rotate, softmax
from .kernels import BACKEND
from .kv_cache import (
    Archive,
    CachePolicy,
    KvCache,
    KvEntry,
    RegionView,
    SimilarityStats,
    archive_append,
    effective_context,
    insert_with_eviction,
    memory_footprint,
    partition,
    similarity_stats,
    topk_select,
)
from .model import (
    DecodeState,
    GenerationRun,
    Model,
    ModelConfig,
    decode_step,
    fix_prefix_generate,
    forward_full,
    generate,
    init_model,
    load_weights,
    save_weights,
)

__version__ = "0.1.0"
