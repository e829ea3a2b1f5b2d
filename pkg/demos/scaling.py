"""Scan vs. attention aggregation cost as the token count doubles.

A quick version of the benchmark: shorter lengths, so it finishes in seconds.
Run `pcmamba bench` for the full sweep.
"""
from pcmamba.bench import METHODS, bench_scaling, fit_loglog_slope

points = bench_scaling([2 ** k for k in range(8, 13)], c=16, repeats=5, measure_memory=False)
for n in sorted({p.token_count for p in points}):
    row = {p.method: p.median_ns / 1e6 for p in points if p.token_count == n}
    print(f"{n:6d} tokens  " + "  ".join(f"{m} {row[m]:8.2f} ms" for m in METHODS))
for m in METHODS:
    slope, se = fit_loglog_slope([p for p in points if p.method == m])
    print(f"{m}: time ~ n^{slope:.2f} (+/- {se:.2f})")
