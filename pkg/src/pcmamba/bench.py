"""Wall-clock scaling of scan aggregation vs. attention aggregation.

Both methods aggregate the same flattened token sequence together with a
fixed set of control tokens. The scan walks Concat(tokens, controls) once; the
attention lets every token attend over Concat(tokens, controls), which is what
makes its cost quadratic in the token count.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .pcm import AttnParams, cross_attention_blocked
from .ssm import SsmParams, scan_chunked
from .tnsr import atomic_write_text

METHODS = ("scan_chunked", "cross_attention")
CSV_HEADER = ("method", "tokens", "median_ns", "peak_bytes", "repeats")


@dataclass(frozen=True)
class BenchPoint:
    token_count: int
    method: str
    median_ns: int
    peak_bytes: int | None
    repeats: int


@contextmanager
def single_threaded():
    """Pin BLAS/OpenMP pools to one thread while timing (no-op if threadpoolctl is absent)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def make_operands(n_tokens: int, c: int, n_ctl: int, seed: int):
    """Identical seeded operands for both methods."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, n_tokens, c))
    ctl = rng.standard_normal((1, n_ctl, c))
    prm = np.random.default_rng(seed + 1)
    return z, ctl, SsmParams.init(prm, c, 8), AttnParams.init(prm, c)


def _runners(z, ctl, ssm_p, attn_p, chunk):
    n = z.shape[1]
    seq = np.concatenate([z, ctl], axis=1)

    def scan():
        return scan_chunked(seq, ssm_p, chunk).data[0, :n]

    def attention():
        return cross_attention_blocked(z, seq, attn_p)[0]

    return {"scan_chunked": scan, "cross_attention": attention}


def bench_scaling(lengths, c: int = 16, repeats: int = 5, chunk: int = 64, n_ctl: int = 8,
                  seed: int = 0, methods=METHODS, measure_memory: bool = True) -> list[BenchPoint]:
    """Median wall time per method and token count (one warm-up run excluded)."""
    lengths = [int(n) for n in lengths]
    if len(lengths) < 4:
        raise ValueError("need at least 4 lengths")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly increasing")
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")

    points = []
    with single_threaded():
        for n in lengths:
            runners = _runners(*make_operands(n, c, n_ctl, seed), chunk)
            for name in methods:
                out = runners[name]()  # warm-up, also the shape check
                if out.shape != (n, c):
                    raise AssertionError(f"{name} produced {out.shape}, expected {(n, c)}")
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    runners[name]()
                    times.append(time.perf_counter_ns() - t0)
                peak = _peak_bytes(runners[name]) if measure_memory else None
                points.append(BenchPoint(n, name, int(statistics.median(times)), peak, repeats))
    return points


def _peak_bytes(fn) -> int | None:
    try:
        tracemalloc.start()
        fn()
        return tracemalloc.get_traced_memory()[1]
    except Exception:  # best effort only
        return None
    finally:
        tracemalloc.stop()


def fit_loglog_slope(points) -> tuple[float, float]:
    """OLS slope of log(time) on log(tokens), with its standard error.

    Accepts BenchPoints or (tokens, time) pairs.
    """
    pairs = [(p.token_count, p.median_ns) if isinstance(p, BenchPoint) else tuple(p) for p in points]
    if len(pairs) < 4:
        raise ValueError("need at least 4 points")
    if any(t <= 0 or n <= 0 for n, t in pairs):
        raise ValueError("token counts and times must be positive")
    x = np.log([n for n, _ in pairs])
    y = np.log([t for _, t in pairs])
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean())) / sxx
    resid = y - y.mean() - slope * xc
    dof = len(x) - 2
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return slope, stderr


def points_to_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        w.writerow((p.method, p.token_count, p.median_ns,
                    "" if p.peak_bytes is None else p.peak_bytes, p.repeats))
    return buf.getvalue()


def write_csv(points, path) -> None:
    atomic_write_text(path, points_to_csv(points))


def read_csv(path) -> list[BenchPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [BenchPoint(int(r["tokens"]), r["method"], int(r["median_ns"]),
                       int(r["peak_bytes"]) if r["peak_bytes"] else None, int(r["repeats"]))
            for r in rows]
