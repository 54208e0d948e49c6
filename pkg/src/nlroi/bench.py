"""Forward-pass scaling benchmark.

The pairwise similarity stage costs Theta(N^2) while every other stage is
linear in N, so forward time against the RoI count should bend toward a
quadratic on a log-log plot once N is large enough for the N x N term to
dominate. ``run_bench`` measures that curve; ``fit_slope`` extracts the
log-log slope over a window.

Timings are medians over repeated runs and the timed region is pinned to
one thread, keeping the measurement interpretable on busy machines.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .block import init_params, nlroi_forward

# D, D_f, D_g, H, W. Both the N^2 similarity matmul and the per-RoI
# embedding convolutions carry a D_f*H*W factor, so their FLOP ratio is
# N/(2D) regardless of D_f. D is kept small to make the quadratic stage
# dominate across the whole measured range; D_f*H*W is large enough that
# even the smallest timed N takes milliseconds, not timer jitter.
DEFAULT_DIMS = (2, 512, 2, 6, 6)


@dataclass(frozen=True)
class BenchRecord:
    n: int
    seconds: float
    flops: int


@dataclass(frozen=True)
class BenchReport:
    dims: tuple
    reps: int
    records: tuple

    def lines(self):
        yield "n\tseconds\tflops"
        for r in self.records:
            yield f"{r.n}\t{r.seconds:.6e}\t{r.flops}"


def attention_flops(n: int, dims) -> int:
    """FLOP count of the similarity matmul: 2 * N^2 * (D_f * H * W)."""
    _, d_f, _, h, w = dims
    return 2 * n * n * d_f * h * w


def run_bench(n_list, dims=DEFAULT_DIMS, reps: int = 10, seed: int = 0) -> BenchReport:
    """Median forward wall time for each N in ascending ``n_list``.

    Inputs are seeded and deterministic; timings of course are not. A
    sustained warmup phase precedes the sweep and one warmup run per N
    precedes its timed repetitions.
    """
    n_list = [int(n) for n in n_list]
    if not n_list:
        raise ValueError("n_list must not be empty")
    if any(n < 1 for n in n_list):
        raise ValueError(f"all N must be >= 1, got {n_list}")
    if sorted(set(n_list)) != n_list:
        raise ValueError(f"n_list must be strictly ascending, got {n_list}")
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    dims = tuple(int(v) for v in dims)
    d, d_f, d_g, h, w = dims
    params = init_params((d, d_f, d_g), seed=seed, dtype=np.float32)
    records = []
    rng = np.random.default_rng(seed + 1)
    with threadpool_limits(limits=1):
        # Burn ~0.75 s of sustained compute first. A cold CPU runs the
        # first (smallest) points at a lower clock, which flattens the
        # fitted slope.
        x_warm = np.random.default_rng(seed + 2).uniform(
            -1, 1, size=(max(n_list), d, h, w)
        ).astype(np.float32)
        deadline = time.perf_counter() + 0.75
        for _ in range(200):
            nlroi_forward(x_warm, params)
            if time.perf_counter() >= deadline:
                break
        for n in n_list:
            x = rng.uniform(-1, 1, size=(n, d, h, w)).astype(np.float32)
            nlroi_forward(x, params)  # warmup
            times = []
            for _ in range(reps):
                start = time.perf_counter()
                nlroi_forward(x, params)
                times.append(time.perf_counter() - start)
            records.append(
                BenchRecord(
                    n=n,
                    seconds=float(np.median(times)),
                    flops=attention_flops(n, dims),
                )
            )
    return BenchReport(dims=dims, reps=reps, records=tuple(records))


def fit_slope(report: BenchReport, n_min: int = 32, n_max: int = 256) -> float:
    """Least-squares slope of log(time) against log(N) within [n_min, n_max]."""
    pts = [(r.n, r.seconds) for r in report.records if n_min <= r.n <= n_max]
    if len(pts) < 2:
        raise ValueError(
            f"need at least two records with N in [{n_min}, {n_max}], "
            f"got {len(pts)}"
        )
    xs = np.log([p[0] for p in pts])
    ys = np.log([p[1] for p in pts])
    return float(np.polyfit(xs, ys, 1)[0])
