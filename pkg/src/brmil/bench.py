"""Stage-breakdown profiling of three bag-level pipelines on CPU.

Pipelines share one input queue:
  brmil           cheap scan of all n, select K, expensive encode on S, aggregate S
  targetnet_like  expensive encode of all n, max pooling (does not depend on K)
  naive           expensive encode of all n, aggregate all n tokens

Stage names: cts_generation (ESA scan/filter of the pair's UTR), gather_all
(contiguous float copy of every candidate tensor), cheap_scan, selection,
expensive_encode, tokenize_pack, aggregation. Peak memory is the process's
peak resident set size.
"""

from __future__ import annotations

import csv
import gc
import io
import math
import os
import resource
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .numcore import RngState, no_grad
from .selector import SelectorConfig, select
from .seqscan import WINDOW

STAGES = ("cts_generation", "gather_all", "cheap_scan", "selection", "expensive_encode",
          "tokenize_pack", "aggregation")
PIPELINES = ("brmil", "targetnet_like", "naive")
REPORT_SCHEMA = "brmil.bench"
REPORT_VERSION = 1


@dataclass(frozen=True)
class BenchConfig:
    Ks: tuple = (32, 64, 128, 256, 512)
    batch_size: int = 4
    warmup: int = 10
    iters: int = 50
    seed: int = 0
    pipelines: tuple = PIPELINES
    threads: int = 1

    def __post_init__(self):
        if self.iters < 10:
            raise ValueError("bench.iters must be >= 10")
        if self.warmup < 0 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("bench: warmup >= 0, batch_size >= 1, threads >= 1")
        bad = set(self.pipelines) - set(PIPELINES)
        if bad:
            raise ValueError(f"bench: unknown pipelines {sorted(bad)}")
        if not self.Ks or min(self.Ks) < 1:
            raise ValueError("bench.Ks must be positive")


@dataclass
class StageTimings:
    pipeline: str
    K: int
    n: int  # candidates per timed iteration
    samples: list  # per timed iteration: {stage: ns, "end_to_end": ns}
    repetitions: int
    warmup: int
    batch: int
    peak_rss_kb: int
    counts: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)

    def mean(self, stage: str) -> float:
        return float(np.mean([s[stage] for s in self.samples]))

    def std(self, stage: str) -> float:
        return float(np.std([s[stage] for s in self.samples], ddof=1))


def clock_resolution_ns() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e9


def peak_rss_kb() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


def threads_from_env(default: int = 1) -> int:
    v = os.environ.get("BRMIL_BENCH_THREADS")
    return max(1, int(v)) if v else default


def attach_sequences(bags: list, seed: int = 0) -> list:
    """Give each bag a random seed row and UTR whose scan length matches its pool size."""
    g = RngState(seed).child("bench-seqs").generator()
    out = []
    for b in bags:
        L = max(b.n, 1) + WINDOW - 1
        out.append((b, g.integers(0, 4, size=10).astype(np.uint8),
                    g.integers(0, 4, size=L).astype(np.uint8)))
    return out


class _Clock:
    def __init__(self):
        self.acc = dict.fromkeys(STAGES, 0)

    def run(self, stage, fn, *args):
        t = time.perf_counter_ns()
        out = fn(*args)
        self.acc[stage] += time.perf_counter_ns() - t
        return out


def _run_batch(model, pipeline: str, K: int, batch: list, pool, counts: dict) -> dict:
    """One pass over a batch of (bag, seed_codes, utr_codes); returns stage durations (ns)."""
    clk = _Clock()
    t0 = time.perf_counter_ns()
    sel_cfg = replace(model.selector, kmax=K)
    mapper = pool.map if pool is not None else map

    clk.run("cts_generation", lambda: list(mapper(lambda item: kernels.esa_scan(item[1], item[2], WINDOW), batch)))
    bags = [item[0] for item in batch]
    xs = clk.run("gather_all", lambda: [(np.asarray(b.x, dtype=np.float64), b.u) for b in bags])
    counts["scanned"] += sum(b.n for b in bags)
    with no_grad():
        if pipeline == "brmil":
            cheap = clk.run("cheap_scan", lambda: [model.student.encode(x, u) for x, u in xs])
            counts["cheap"] += sum(len(c[1]) for c in cheap)
            sels = clk.run("selection", lambda: list(mapper(
                lambda a: select(sel_cfg, a[1][1], a[1][0], a[0].p).S, zip(bags, cheap))))

            def encode():
                return [model.teacher.encode(x[S], u[S]) for (x, u), S in zip(xs, sels)]

            enc = clk.run("expensive_encode", encode)
            subset = [(b.s_esa[S], b.p[S]) for b, S in zip(bags, sels)]
        else:
            enc = clk.run("expensive_encode", lambda: [model.teacher.encode(x, u) for x, u in xs])
            subset = [(b.s_esa, b.p) for b in bags]
        counts["expensive"] += sum(len(e[1]) for e in enc)

        if pipeline == "targetnet_like":
            clk.run("aggregation", lambda: [float(z.max()) if len(z) else 0.0 for _, z in enc])
        else:
            def pack():
                L = max(max(len(z) for _, z in enc), 1)
                d = model.agg.cfg.d_tok
                arr = np.zeros((len(enc), L, d))
                mask = np.zeros((len(enc), L), dtype=bool)
                for j, ((h, z), (s, p)) in enumerate(zip(enc, subset)):
                    k = len(z)
                    arr[j, :k] = np.column_stack([h, z, s, p])
                    mask[j, :k] = True
                return arr, mask

            arr, mask = clk.run("tokenize_pack", pack)
            counts["tokens"] += int(mask.sum())
            live = mask.any(axis=1)
            if live.any():
                clk.run("aggregation", lambda: model.agg.forward(arr[live], mask[live]))
    clk.acc["end_to_end"] = time.perf_counter_ns() - t0
    return clk.acc


def profile_pipeline(cfg: BenchConfig, bags: list, model) -> list:
    """Warmup then timed iterations per (pipeline, K) over a fixed input queue."""
    if model is None:
        raise ValueError("profile_pipeline needs a model (teacher, student, aggregator)")
    items = attach_sequences(bags, cfg.seed)
    live = [it for it in items if it[0].n > 0]
    if not live:
        raise ValueError("profile_pipeline: no nonempty bags")
    queue = [[live[(i * cfg.batch_size + j) % len(live)] for j in range(cfg.batch_size)]
             for i in range(cfg.warmup + cfg.iters)]
    res_ns = clock_resolution_ns()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    out = []
    try:
        for pipeline in cfg.pipelines:
            # K values are interleaved per iteration so slow drift (thermal, other
            # load) spreads evenly over the sweep instead of tracking K
            counts = {K: {"scanned": 0, "cheap": 0, "expensive": 0, "tokens": 0} for K in cfg.Ks}
            samples = {K: [] for K in cfg.Ks}
            gc.collect()
            gc.disable()
            try:
                for it, batch in enumerate(queue):
                    for K in cfg.Ks:
                        c = counts[K] if it >= cfg.warmup else dict.fromkeys(counts[K], 0)
                        acc = _run_batch(model, pipeline, K, batch, pool, c)
                        if it >= cfg.warmup:
                            samples[K].append(acc)
            finally:
                gc.enable()
            n = sum(b[0].n for b in queue[cfg.warmup])
            for K in cfg.Ks:
                flagged = [s for s in STAGES
                           if 0 < np.mean([x[s] for x in samples[K]]) < 10 * res_ns]
                out.append(StageTimings(pipeline, K, n, samples[K], cfg.iters, cfg.warmup,
                                        cfg.batch_size, peak_rss_kb(), counts[K], flagged))
    finally:
        if pool is not None:
            pool.shutdown()
    return out


def selector_complexity_probe(ns=(1_000, 10_000, 100_000), cfg: SelectorConfig = SelectorConfig(),
                              seed: int = 0, repeats: int = 3) -> list:
    """Heap-comparison counts and wall time of the per-bin heaps and full selection."""
    rows = []
    for n in ns:
        g = RngState(seed).child(f"probe{n}").generator()
        z = g.normal(size=n)
        p = g.random(n)
        h = g.normal(size=(n, 16))
        _, _, comps = kernels.bin_topm(p, z, cfg.bins, cfg.heap_size)
        best = math.inf
        for _ in range(repeats):
            t = time.perf_counter()
            select(cfg, z, h, p)
            best = min(best, time.perf_counter() - t)
        rows.append({"n": n, "m": cfg.heap_size, "comparisons": int(comps),
                     "per_item": comps / n, "c_fit": comps / (n * math.log2(max(cfg.heap_size, 2))),
                     "select_seconds": best})
    return rows


def kernel_benchmark(utr_lengths=(500, 2000, 8000), pool_sizes=(1_000, 10_000, 100_000),
                     seed: int = 0, repeats: int = 5) -> list:
    """Compiled kernels against the pure-Python fallback on identical inputs."""
    g = RngState(seed).child("kernels").generator()
    backends = [("fallback", kernels.fallback)]
    if kernels.compiled is not None:
        backends.insert(0, ("compiled", kernels.compiled))

    def timed(fn, *args):
        best = math.inf
        for _ in range(repeats):
            t = time.perf_counter()
            fn(*args)
            best = min(best, time.perf_counter() - t)
        return best

    rows = []
    for L in utr_lengths:
        seed_codes = g.integers(0, 4, size=10).astype(np.uint8)
        utr = g.integers(0, 4, size=L).astype(np.uint8)
        for name, mod in backends:
            rows.append({"kernel": "esa_scan", "size": L, "backend": name,
                         "seconds": timed(mod.esa_scan, seed_codes, utr, WINDOW)})
    for n in pool_sizes:
        p, z = g.random(n), g.normal(size=n)
        for name, mod in backends:
            rows.append({"kernel": "bin_topm", "size": n, "backend": name,
                         "seconds": timed(mod.bin_topm, p, z, 16, 8)})
    base = {(r["kernel"], r["size"]): r["seconds"] for r in rows if r["backend"] == "fallback"}
    for r in rows:
        r["speedup_vs_fallback"] = base[(r["kernel"], r["size"])] / r["seconds"]
    return rows


def report_rows(timings: list) -> list:
    rows = []
    for t in timings:
        e2e = t.mean("end_to_end")
        row = {"pipeline": t.pipeline, "K": t.K, "batch": t.batch, "n_per_batch": t.n,
               "iters": t.repetitions, "warmup": t.warmup,
               "latency_mean_ms": e2e / 1e6, "latency_std_ms": t.std("end_to_end") / 1e6,
               "throughput_pairs_s": t.batch / (e2e / 1e9) if e2e else math.nan,
               "peak_rss_mb": t.peak_rss_kb / 1024.0}
        for s in STAGES:
            row[f"{s}_ms"] = t.mean(s) / 1e6
        row["stage_fraction"] = sum(t.mean(s) for s in STAGES) / e2e if e2e else math.nan
        row["flagged"] = ";".join(t.flagged)
        rows.append(row)
    return rows


def emit_report(timings: list, path=None) -> tuple:
    """Write the CSV report (schema header line first); returns (csv_text, summary_table)."""
    if not timings:
        raise ValueError("emit_report: no timings")
    rows = report_rows(timings)
    buf = io.StringIO()
    buf.write(f"# {REPORT_SCHEMA} v{REPORT_VERSION}\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    lines = [f"{'pipeline':<15}{'K':>6}{'latency ms':>13}{'pairs/s':>10}{'agg ms':>9}{'rss MB':>9}"]
    for r in rows:
        lines.append(f"{r['pipeline']:<15}{r['K']:>6}{r['latency_mean_ms']:>13.2f}"
                     f"{r['throughput_pairs_s']:>10.1f}{r['aggregation_ms']:>9.2f}{r['peak_rss_mb']:>9.0f}")
    return text, "\n".join(lines)


def fit_quadratic(Ks, values) -> dict:
    """Least-squares fit values ~ a + b K^2 with R^2."""
    K2 = np.asarray(Ks, dtype=np.float64) ** 2
    y = np.asarray(values, dtype=np.float64)
    A = np.column_stack([np.ones_like(K2), K2])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss = float(((y - y.mean()) ** 2).sum())
    return {"a": float(coef[0]), "b": float(coef[1]),
            "r2": 1.0 - float((resid ** 2).sum()) / ss if ss > 0 else 1.0}


def workload_counts(timings: list) -> list:
    return [{"pipeline": t.pipeline, "K": t.K, **t.counts} for t in timings]


def bench_model(seed: int = 0, teacher=None, student=None, agg_cfg=None, selector=None):
    """Default-size model with seeded random weights (timing does not depend on training)."""
    from .encoders import STUDENT_DEFAULT, TEACHER_DEFAULT, Encoder
    from .training import BRMIL

    rs = RngState(seed)
    teacher = teacher or Encoder(TEACHER_DEFAULT, rs)
    student = student or Encoder(STUDENT_DEFAULT, rs)
    return BRMIL.build(teacher, student, selector or SelectorConfig(), agg_cfg, seed=seed)

