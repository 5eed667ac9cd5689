"""Compiled kernels versus the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Times the three kernels at decode-like sizes, then a full ADSA generation
under each backend (in a subprocess, since the backend is fixed at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from adsa import kernels

E2E = """
import time
from adsa import CachePolicy, ModelConfig, generate, init_model, BACKEND
m = init_model(ModelConfig(vocab_size=64, d_model=32, n_heads=2, n_layers=2, seq_capacity=1024))
t = time.perf_counter()
generate(m, [0], 1024, CachePolicy(32, 128, 352, 512, "adsa"))
print(BACKEND, time.perf_counter() - t)
"""


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    print(f"{'kernel':<28}" + "".join(f"{b:>14}" for b in backends) + "   speedup")
    cases = []
    for L in (16, 128, 352):
        V = np.ascontiguousarray(rng.normal(size=(L, 16)))
        cases.append((f"similarity L={L} d=16", "similarity", (V,)))
    for L in (64, 512):
        q, K, V = rng.normal(size=16), rng.normal(size=(L, 16)), rng.normal(size=(L, 16))
        cases.append((f"attend L={L} d=16", "attend", (q, K, V)))
    cases.append(("rope d=16", "rope", (rng.normal(size=16), 777, 1e4)))
    for label, fn, args in cases:
        times = {}
        for name, mod in backends.items():
            f = getattr(mod, fn)
            n = max(1, repeat)
            times[name] = min(timeit.repeat(lambda: f(*args), number=n, repeat=3)) / n
        cols = "".join(f"{times[b] * 1e6:>12.1f}us" for b in backends)
        speed = f"{times['python'] / times['cython']:8.1f}x" if "cython" in times else ""
        print(f"{label:<28}{cols}{speed}")


def bench_e2e():
    print("\nend-to-end: T=1024 adsa generation, capacity 512")
    for force in ("", "1"):
        env = {**os.environ}
        env.pop("ADSA_PURE_PYTHON", None)
        if force:
            env["ADSA_PURE_PYTHON"] = force
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:<8} {float(out[1]):.2f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if not args.skip_e2e:
        bench_e2e()


if __name__ == "__main__":
    main()
