"""Wall-clock comparison: selective scan vs a quadratic attention baseline.

Both run in float32 at matched widths. The attention baseline is a real
single-head softmax attention over the same sequence, computed in row
blocks so memory stays bounded while the arithmetic stays O(L^2 * d).
Timings report the median over several repetitions after one warmup.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .ssm import init_scan_params, selective_scan
from .tensor import Tensor, no_grad


def attention_reference(
    x: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    row_chunk: int = 1024,
) -> np.ndarray:
    """Full softmax attention over [L, d]; work scales with L^2."""
    q = x @ w_q
    k = x @ w_k
    v = x @ w_v
    scale = 1.0 / math.sqrt(x.shape[1])
    out = np.empty_like(q)
    for start in range(0, x.shape[0], row_chunk):
        stop = min(start + row_chunk, x.shape[0])
        scores = (q[start:stop] @ k.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[start:stop] = scores @ v
    return out


def _median_time(fn: Callable[[], object], reps: int) -> float:
    fn()  # warmup
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@dataclass
class BenchRow:
    length: int
    scan_seconds: float
    attention_seconds: float

    def csv_row(self) -> str:
        return f"{self.length},{self.scan_seconds:.6f},{self.attention_seconds:.6f}"


CSV_HEADER = "length,scan_seconds,attention_seconds"


def bench_scan(
    lengths: Sequence[int],
    d_inner: int = 64,
    d_state: int = 8,
    reps: int = 5,
    seed: int = 0,
) -> list[BenchRow]:
    """Median forward wall-clock of the scan and the attention baseline for
    each sequence length; lengths must be ascending."""
    lengths = list(lengths)
    if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ContractError(f"lengths must be ascending and non-empty: {lengths}")
    if reps < 1:
        raise ContractError("reps must be >= 1")
    rng = np.random.default_rng(seed)
    params = init_scan_params(np.random.default_rng([seed, 1]), d_inner, d_state, np.float32)
    w_q, w_k, w_v = (
        (rng.normal(size=(d_inner, d_inner)) / math.sqrt(d_inner)).astype(np.float32)
        for _ in range(3)
    )

    rows = []
    for length in lengths:
        x = rng.normal(size=(length, d_inner)).astype(np.float32)
        xt = Tensor(x)

        def run_scan():
            with no_grad():
                return selective_scan(xt, params, "forward")

        scan_s = _median_time(run_scan, reps)
        attn_s = _median_time(lambda: attention_reference(x, w_q, w_k, w_v), reps)
        rows.append(BenchRow(length=length, scan_seconds=scan_s, attention_seconds=attn_s))
    return rows


def format_csv(rows: Sequence[BenchRow]) -> str:
    return "\n".join([CSV_HEADER] + [r.csv_row() for r in rows])


def doubling_ratios(rows: Sequence[BenchRow]) -> list[tuple[int, float, float]]:
    """(length, scan_ratio, attention_ratio) for consecutive length doublings."""
    out = []
    by_len = {r.length: r for r in rows}
    for r in rows:
        if r.length * 2 in by_len:
            nxt = by_len[r.length * 2]
            out.append(
                (
                    nxt.length,
                    nxt.scan_seconds / r.scan_seconds,
                    nxt.attention_seconds / r.attention_seconds,
                )
            )
    return out
