"""Experiment runners: variant comparison, ablation, locality and memory reports.

Divergence from the dense run stands in for image-quality metrics: both runs
share the sampling stream, so tokens agree until a policy's logits move far
enough to change a draw.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .kv_cache import VARIANTS, CachePolicy, memory_footprint
from .model import (
    ModelConfig,
    fix_prefix_generate,
    fixed_head_length,
    generate,
    init_model,
    weight_shapes,
)

log = logging.getLogger(__name__)

STEPS_SCHEMA = "# adsa steps.csv schema v1"
HISTOGRAM_SCHEMA = "# adsa histogram.csv schema v1"
MEMORY_SCHEMA = "# adsa memory.csv schema v1"

# logits closer than this count as identical when locating divergence
LOGIT_EQ_TOL = 1e-12

STEP_COLUMNS = [
    "policy", "variant", "seed", "step", "position", "token",
    "context_min", "context_mean", "context_max", "occupancy",
    "accounted_bytes", "evicted_position", "logit_dev",
]


def parse_policy(text: str) -> CachePolicy:
    """Parse ``label=n,m,K,C``; the label starts with the variant name.

    ``adsa-256=32,64,160,256`` is an adsa policy labelled ``adsa-256``.
    """
    label, sep, nums = text.partition("=")
    if not sep:
        raise ValueError(f"policy {text!r} must look like <name>=<n,m,K,C>")
    label = label.strip()
    variant = None
    for v in sorted(VARIANTS, key=len, reverse=True):
        if label == v or (label.startswith(v) and label[len(v)] in "-_:.@"):
            variant = v
            break
    if variant is None:
        raise ValueError(f"policy name {label!r} must start with one of {VARIANTS}")
    try:
        n, m, k, c = (int(x) for x in nums.split(","))
    except ValueError:
        raise ValueError(f"policy {text!r}: expected four integers n,m,K,C") from None
    return CachePolicy(n, m, k, c, variant, name=label)


def _policy_from_json(p) -> CachePolicy:
    return parse_policy(p) if isinstance(p, str) else CachePolicy.from_dict(p)


@dataclass
class ExperimentSpec:
    model: ModelConfig
    policies: list
    length: int
    prompt: list = field(default_factory=lambda: [0])
    seeds: list = field(default_factory=lambda: [0])
    temperature: float = 0.0
    out_dir: str = "adsa-out"
    capture_weights: bool = False
    row_width: int = 24
    bucket_width: int = 1
    batch_sizes: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64, 128])
    bytes_per_scalar: int = 2

    def __post_init__(self):
        if not self.policies:
            raise ValueError("policy grid is empty")
        if self.length < 1:
            raise ValueError("length must be positive")
        if len(self.prompt) + self.length - 1 > self.model.seq_capacity:
            raise ValueError(
                f"prompt + length needs {len(self.prompt) + self.length - 1} positions, "
                f"seq_capacity is {self.model.seq_capacity}"
            )
        if not self.seeds:
            raise ValueError("at least one seed is required")
        labels = [p.label for p in self.policies]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate policy labels in {labels}")

    @property
    def positions(self) -> int:
        return len(self.prompt) + self.length - 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["policies"] = [_policy_from_json(p) for p in d.get("policies", [])]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "policies": [p.to_dict() for p in self.policies],
            "length": self.length,
            "prompt": list(self.prompt),
            "seeds": list(self.seeds),
            "temperature": self.temperature,
            "out_dir": self.out_dir,
            "capture_weights": self.capture_weights,
            "row_width": self.row_width,
            "bucket_width": self.bucket_width,
            "batch_sizes": list(self.batch_sizes),
            "bytes_per_scalar": self.bytes_per_scalar,
        }


def dense_reference(spec: ExperimentSpec) -> CachePolicy:
    for p in spec.policies:
        if p.variant == "dense" and p.capacity >= spec.positions:
            return p
    return CachePolicy(capacity=spec.positions, variant="dense", name="dense")


def _pct_reduction(value: float, baseline: float) -> float:
    return 100.0 * (1.0 - value / baseline)


def policy_metrics(run, ref, logit_devs: list) -> dict:
    """Summary numbers for one run against the dense reference run."""
    ctx_max = max(t.context_max for t in run.trace)
    ref_ctx = max(t.context_max for t in ref.trace)
    occ = max(t.cache_occupancy for t in run.trace)
    ref_occ = max(t.cache_occupancy for t in ref.trace)
    peak_bytes = max(t.accounted_bytes for t in run.trace)
    ref_bytes = max(t.accounted_bytes for t in ref.trace)
    diff = [a != b for a, b in zip(run.tokens, ref.tokens)]
    first_div = diff.index(True) if any(diff) else None
    over = [i for i, dv in enumerate(logit_devs) if dv > LOGIT_EQ_TOL]
    coincide = []
    for t, rt, dv in zip(run.trace, ref.trace, logit_devs):
        if t.context_min != rt.context_max:
            break
        coincide.append(dv)
    return {
        "policy": run.policy.label,
        "variant": run.policy.variant,
        "seed": run.seed,
        "peak_context": ctx_max,
        "mean_context": float(np.mean([t.context_mean for t in run.trace])),
        "peak_occupancy": occ,
        "peak_accounted_bytes": peak_bytes,
        "context_reduction_pct": _pct_reduction(ctx_max, ref_ctx),
        "cache_reduction_pct": _pct_reduction(occ, ref_occ),
        "bytes_ratio": peak_bytes / ref_bytes,
        "first_divergence_step": first_div,
        "hamming_fraction": sum(diff) / len(diff),
        "first_logit_divergence_step": over[0] if over else None,
        "mean_logit_dev": float(np.mean(logit_devs)),
        "logit_max_abs_dev_while_coincide": max(coincide) if coincide else None,
        "coinciding_steps": len(coincide),
    }


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def step_rows(run, logit_devs: list) -> list:
    p = run.policy
    return [
        [p.label, p.variant, run.seed, t.step, t.position, t.sampled_token,
         t.context_min, t.context_mean, t.context_max, t.cache_occupancy,
         t.accounted_bytes, t.evicted_position, dv]
        for t, dv in zip(run.trace, logit_devs)
    ]


def steps_csv(rows: list) -> str:
    buf = io.StringIO()
    buf.write(STEPS_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def _run_grid(spec: ExperimentSpec, policies: list, model=None):
    """Generate every (policy, seed) pair plus the dense reference per seed."""
    model = model or init_model(spec.model)
    ref_policy = dense_reference(spec)
    out = []
    for seed in spec.seeds:
        kw = dict(keep_logits=True, capture=spec.capture_weights,
                  bytes_per_scalar=spec.bytes_per_scalar)
        ref = generate(model, spec.prompt, spec.length, ref_policy, seed, spec.temperature, **kw)
        for p in policies:
            if p == ref_policy:
                run = ref
            else:
                run = generate(model, spec.prompt, spec.length, p, seed, spec.temperature, **kw)
            devs = [float(np.abs(a - b).max()) for a, b in zip(run.logits, ref.logits)]
            out.append((run, ref, devs))
            log.info("policy %s seed %d done", p.label, seed)
    return out


def run_compare(spec: ExperimentSpec, out_dir: Optional[Path] = None, model=None) -> dict:
    """Run every policy against dense; write ``steps.csv`` and ``summary.json``.

    Returns the summary dict. Nothing is written when ``out_dir`` is None.
    """
    results = _run_grid(spec, spec.policies, model)
    rows, metrics = [], []
    for run, ref, devs in results:
        rows.extend(step_rows(run, devs))
        metrics.append(policy_metrics(run, ref, devs))
    summary = {"kind": "compare", "spec": spec.to_dict(), "policies": metrics}
    if spec.capture_weights:
        hist = []
        for run, _, _ in results:
            hist.extend((run.policy.label, run.seed, *r)
                        for r in locality_report(run, spec.row_width, spec.bucket_width))
        summary["histogram_rows"] = len(hist)
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write(out_dir / "steps.csv", steps_csv(rows))
        _write(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if spec.capture_weights:
            _write(out_dir / "histogram.csv", histogram_csv(hist))
    return summary


def ablation_policies(policy: CachePolicy) -> list:
    """Full policy plus one variant per removed region, same capacity."""
    base = policy.label
    return [
        replace(policy, name=f"{base}"),
        replace(policy, n_prefix=0, name=f"{base}-prefix_off"),
        replace(policy, k_select=0, name=f"{base}-select_off"),
        replace(policy, m_local=0, name=f"{base}-local_off"),
    ]


def divergence_key(m: dict) -> tuple:
    return (m["hamming_fraction"], m["mean_logit_dev"])


def run_ablation(spec: ExperimentSpec, out_dir: Optional[Path] = None, model=None) -> dict:
    """Prefix/select/local removal study on the first adsa policy in the grid."""
    base = next((p for p in spec.policies if p.variant == "adsa"), None)
    if base is None:
        raise ValueError("ablation needs an adsa policy in the grid")
    variants = ablation_policies(base)
    results = _run_grid(spec, variants, model)
    rows, metrics = [], []
    for run, ref, devs in results:
        rows.extend(step_rows(run, devs))
        metrics.append(policy_metrics(run, ref, devs))
    per_seed = []
    for seed in spec.seeds:
        removals = [m for m in metrics if m["seed"] == seed and m["policy"] != base.label]
        worst = max(removals, key=divergence_key)
        per_seed.append({"seed": seed, "largest_divergence": worst["policy"]})
    local_label = variants[3].label
    summary = {
        "kind": "ablate",
        "spec": spec.to_dict(),
        "policies": metrics,
        "largest_divergence": per_seed,
        "local_off_largest_fraction": sum(r["largest_divergence"] == local_label for r in per_seed)
        / len(per_seed),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write(out_dir / "steps.csv", steps_csv(rows))
        _write(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def step_distance_mass(records: list, bucket_width: int = 1) -> np.ndarray:
    """Attention mass per distance bucket for one step, averaged over heads.

    Bucket ``b`` holds distances ``[b*w, (b+1)*w)`` where distance is
    ``q_position - key_position``. Sums to 1.
    """
    total = None
    for r in records:
        d = r["q_position"] - np.asarray(r["used_positions"])
        h = np.bincount(d // bucket_width, weights=np.asarray(r["weights"]))
        if total is None:
            total = h
        else:
            n = max(len(total), len(h))
            total = np.pad(total, (0, n - len(total))) + np.pad(h, (0, n - len(h)))
    return total / len(records)


def step_column_mass(records: list, row_width: int) -> np.ndarray:
    """Mass on keys exactly ``k`` rows above the query (index ``k-1``)."""
    total = np.zeros(0)
    for r in records:
        d = r["q_position"] - np.asarray(r["used_positions"])
        w = np.asarray(r["weights"])
        same = (d > 0) & (d % row_width == 0)
        h = np.bincount(d[same] // row_width - 1, weights=w[same]) if same.any() else np.zeros(0)
        n = max(len(total), len(h))
        total = np.pad(total, (0, n - len(total))) + np.pad(h, (0, n - len(h)))
    return total / len(records)


def _records(run_or_records) -> list:
    recs = getattr(run_or_records, "weight_records", run_or_records)
    if not recs:
        raise ValueError("no captured attention weights; run with capture enabled")
    if any(r.get("weights") is None for r in recs):
        raise ValueError("attention records are missing weights")
    return recs


def locality_report(run_or_records, row_width: int = 24, bucket_width: int = 1) -> list:
    """Histogram rows ``(kind, bucket, lo, hi, mass)`` averaged over steps.

    ``distance`` rows sum to 1. ``column`` rows give the mass on the same
    column ``bucket`` rows up for a raster of width ``row_width``.
    """
    recs = _records(run_or_records)
    by_step = {}
    for r in recs:
        by_step.setdefault(r.get("step", r["q_position"]), []).append(r)
    dist, col = np.zeros(0), np.zeros(0)
    for step in sorted(by_step):
        dm = step_distance_mass(by_step[step], bucket_width)
        cm = step_column_mass(by_step[step], row_width)
        n = max(len(dist), len(dm))
        dist = np.pad(dist, (0, n - len(dist))) + np.pad(dm, (0, n - len(dm)))
        n = max(len(col), len(cm))
        col = np.pad(col, (0, n - len(col))) + np.pad(cm, (0, n - len(cm)))
    dist /= len(by_step)
    col /= len(by_step)
    rows = [("distance", b, b * bucket_width, (b + 1) * bucket_width - 1, float(m))
            for b, m in enumerate(dist)]
    rows += [("column", k + 1, (k + 1) * row_width, (k + 1) * row_width, float(m))
             for k, m in enumerate(col)]
    return rows


def histogram_csv(rows: list) -> str:
    buf = io.StringIO()
    buf.write(HISTOGRAM_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "seed", "kind", "bucket", "lo", "hi", "mass"])
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def run_locality(spec: ExperimentSpec, out_dir: Optional[Path] = None, model=None) -> dict:
    spec = replace(spec, capture_weights=True)
    model = model or init_model(spec.model)
    rows = []
    for seed in spec.seeds:
        for p in spec.policies:
            run = generate(model, spec.prompt, spec.length, p, seed, spec.temperature, capture=True)
            rows.extend((p.label, seed, *r)
                        for r in locality_report(run, spec.row_width, spec.bucket_width))
    summary = {"kind": "locality", "spec": spec.to_dict(), "rows": len(rows)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write(out_dir / "histogram.csv", histogram_csv(rows))
        _write(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    summary["histogram"] = rows
    return summary


def model_bytes(config: ModelConfig, bytes_per_scalar: int = 2) -> int:
    return sum(int(np.prod(s)) for _, s, _ in weight_shapes(config)) * bytes_per_scalar


def peak_cache_bytes(config: ModelConfig, policy: CachePolicy, positions: int,
                     bytes_per_scalar: int = 2) -> int:
    """Accounted per-sequence KV bytes once ``positions`` tokens were processed."""
    occ = min(policy.capacity, positions)
    return memory_footprint(occ, config.head_dim, bytes_per_scalar=bytes_per_scalar,
                            n_layers=config.n_layers, n_heads=config.n_heads)


def crossover_batch(cache_bytes: int, fixed_bytes: int) -> int:
    """Smallest batch whose cache bytes exceed the fixed model bytes."""
    if cache_bytes <= 0:
        raise ValueError("cache bytes must be positive")
    return fixed_bytes // cache_bytes + 1


def memory_report(spec: ExperimentSpec) -> list:
    """Rows ``(policy, batch, cache_bytes, model_bytes, total_bytes)``."""
    if any(b < 1 for b in spec.batch_sizes):
        raise ValueError("batch sizes must be >= 1")
    fixed = model_bytes(spec.model, spec.bytes_per_scalar)
    rows = []
    for p in spec.policies:
        per_seq = peak_cache_bytes(spec.model, p, spec.positions, spec.bytes_per_scalar)
        for b in spec.batch_sizes:
            rows.append((p.label, b, b * per_seq, fixed, b * per_seq + fixed))
    return rows


def run_memory(spec: ExperimentSpec, out_dir: Optional[Path] = None) -> dict:
    rows = memory_report(spec)
    fixed = model_bytes(spec.model, spec.bytes_per_scalar)
    curves = []
    for p in spec.policies:
        per_seq = peak_cache_bytes(spec.model, p, spec.positions, spec.bytes_per_scalar)
        curves.append({"policy": p.label, "cache_bytes_per_sequence": per_seq,
                       "crossover_batch": crossover_batch(per_seq, fixed)})
    summary = {"kind": "memory", "spec": spec.to_dict(), "model_bytes": fixed, "curves": curves}
    if out_dir is not None:
        out_dir = Path(out_dir)
        buf = io.StringIO()
        buf.write(MEMORY_SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "batch", "cache_bytes", "model_bytes", "total_bytes"])
        w.writerows(rows)
        _write(out_dir / "memory.csv", buf.getvalue())
        _write(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def pairwise_overlap(sequences: Sequence) -> float:
    """Mean fraction of equal tokens over all pairs of token sequences."""
    vals = []
    for i in range(len(sequences)):
        for j in range(i + 1, len(sequences)):
            a, b = sequences[i], sequences[j]
            vals.append(sum(x == y for x, y in zip(a, b)) / len(a))
    return float(np.mean(vals)) if vals else 1.0


def prefix_fixing_report(model, prompt, length, policy, fixed_fraction, seeds,
                         temperature: float = 1.0) -> dict:
    """Overlap of runs sharing a fixed head versus free runs with the same seeds.

    Descriptive only; an untrained model gives no guarantee on direction.
    """
    shared = [r.tokens for r in fix_prefix_generate(
        model, prompt, length, policy, fixed_fraction, seeds, temperature)]
    free = [generate(model, prompt, length, policy, s, temperature).tokens for s in seeds]
    head = fixed_head_length(fixed_fraction, length)
    out = {
        "fixed_tokens": head,
        "shared_overlap": pairwise_overlap(shared),
        "free_overlap": pairwise_overlap(free),
        "shared_tail_overlap": None,
        "free_tail_overlap": None,
    }
    if head < length:
        out["shared_tail_overlap"] = pairwise_overlap([t[head:] for t in shared])
        out["free_tail_overlap"] = pairwise_overlap([t[head:] for t in free])
    return out
