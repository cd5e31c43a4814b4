"""Forward-time scaling measurements and the quadratic reference stub.

Each length is timed as the median of `reps` runs after `warmup` unmeasured
runs, single numeric thread by default so the log-log slope is stable. The
reference stub materializes a dense position-by-position mixing matrix the
way attention-style layers do, giving the O(n^2) curve the network's
O(n log n) curve is compared against.
"""

from __future__ import annotations

import time

import numpy as np
from threadpoolctl import threadpool_limits

from .model import Model, ModelConfig
from .tensor import Tensor


def attention_stub_forward(x: np.ndarray) -> np.ndarray:
    """Dense softmax mixing over all position pairs: O(n^2 m) work."""
    n, m = x.shape
    scores = (x @ x.T) / np.sqrt(m).astype(x.dtype)
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores @ x


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _measure(fn, reps: int, warmup: int) -> dict:
    for _ in range(warmup):
        fn()
    times = sorted(_time_once(fn) for _ in range(reps))
    return {
        "median_ms": times[len(times) // 2] * 1e3,
        "mean_ms": sum(times) / len(times) * 1e3,
    }


def run_bench(lengths, maps: int = 96, blocks: int = 1, arch: str = "model",
              reps: int = 5, warmup: int = 2, threads: int = 1, seed: int = 0):
    """Time forward passes per length; returns a list of row dicts.

    Rows carry n, mean_ms, median_ms and ms_per_n_log_n; a MemoryError at
    some length yields an `oom` row and the sweep continues.
    """
    rng = np.random.default_rng(seed)
    rows = []
    model = None
    if arch == "model":
        k_max = max(int(n).bit_length() - 1 for n in lengths)
        model = Model(ModelConfig(maps=maps, blocks=blocks, residual=blocks > 1),
                      k_max, rng, dtype="f32")
    with threadpool_limits(limits=threads):
        for n in sorted(int(v) for v in lengths):
            if n < 2 or n & (n - 1):
                raise ValueError(f"bench lengths must be powers of two >= 2, got {n}")
            try:
                if arch == "model":
                    state = Tensor(rng.uniform(-1, 1, size=(1, n, maps)).astype(np.float32))
                    timing = _measure(lambda: model.forward(None, state), reps, warmup)
                elif arch == "attention":
                    x = rng.uniform(-1, 1, size=(n, maps)).astype(np.float32)
                    timing = _measure(lambda: attention_stub_forward(x), reps, warmup)
                else:
                    raise ValueError(f"unknown arch {arch!r}")
            except MemoryError:
                rows.append({"n": n, "oom": True})
                continue
            k = n.bit_length() - 1
            rows.append({
                "n": n,
                "mean_ms": round(timing["mean_ms"], 4),
                "median_ms": round(timing["median_ms"], 4),
                "ms_per_n_log_n": round(timing["median_ms"] / (n * max(k, 1)), 8),
            })
    return rows


def fit_slope(rows) -> float | None:
    """Least-squares log-log slope over the top half of measured lengths."""
    good = [(r["n"], r["median_ms"]) for r in rows if "oom" not in r]
    if len(good) < 2:
        return None
    good.sort()
    top = good[len(good) // 2:] if len(good) > 3 else good
    xs = np.log2([n for n, _ in top])
    ys = np.log2([t for _, t in top])
    return float(np.polyfit(xs, ys, 1)[0])
