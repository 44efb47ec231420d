"""Influence weights, best-K mass, and the truncation bound, checked constructively.

For a bag with real tokens z_1..z_c and an aggregator f evaluated on masked
subsets, the per-token sensitivity g_i is the largest of

  * the token gradient norm ||d f(Z) / d z_i|| over masked states Z containing i
  * the secant |f(Z) - f(Z without i)| / ||z_i - z_0||  with z_0 = 0 (padding)

The secant term makes the one-token-at-a-time masking chain bounded by
g_i * R per removed token even though masking is a discrete change, so
|f(full) - f(S)| <= G * R * eps_K <= 2 * G * R * eps_K holds exactly in
exhaustive mode.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .metrics import metrics
from .numcore import Tensor

EXHAUSTIVE_MAX = 12


@dataclass
class InfluenceProfile:
    w: np.ndarray
    g: np.ndarray
    G: float
    R: float
    psi: np.ndarray  # psi[K] for K = 0..count
    mode: str
    states: int
    advisory: bool = False

    @property
    def count(self) -> int:
        return len(self.w)

    def covered_mass(self, S) -> float:
        return float(self.w[np.asarray(S, dtype=np.int64)].sum())


@dataclass
class BoundReport:
    gap: float
    bound: float
    G: float
    R: float
    eps: float
    delta: float
    chain_sum: float
    ok: bool
    advisory: bool = False


@dataclass
class SweepResult:
    axis: str  # K or n_cap
    values: list
    mode: str
    rows: list = field(default_factory=list)  # one dict per axis value

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


def _f(agg):
    return agg.forward if hasattr(agg, "forward") else agg


def _real_tokens(tokens, mask) -> np.ndarray:
    tokens = np.asarray(getattr(tokens, "data", tokens), dtype=np.float64)
    if mask is None:
        return tokens
    return tokens[np.asarray(mask, dtype=bool)]


def eval_states(agg, tokens: np.ndarray, states: np.ndarray, grad: bool = True,
                chunk: int = 512) -> tuple:
    """f on every masked state ([m, c] bool) and, optionally, token gradients [m, c, d]."""
    f = _f(agg)
    m, c = states.shape
    vals = np.empty(m)
    grads = np.zeros((m, c, tokens.shape[1])) if grad else None
    for s in range(0, m, chunk):
        st = states[s:s + chunk]
        x = Tensor(np.broadcast_to(tokens, (len(st),) + tokens.shape).copy(), requires_grad=grad)
        if grad:
            out = f(x, st)
            nc.tsum(out).backward()
            grads[s:s + chunk] = x.grad * st[:, :, None]
        else:
            with nc.no_grad():
                out = f(x, st)
        vals[s:s + chunk] = out.data
    return vals, grads


def _all_states(c: int) -> np.ndarray:
    codes = np.arange(1, 2 ** c, dtype=np.int64)
    return ((codes[:, None] >> np.arange(c)) & 1).astype(bool)


def influence_weights(agg, tokens, mask=None, mode: str = "exhaustive", samples: int = 256,
                      rng: np.random.Generator | None = None) -> InfluenceProfile:
    tok = _real_tokens(tokens, mask)
    c = len(tok)
    if c == 0:
        raise ValueError("influence_weights: bag has no real tokens")
    if mode == "exhaustive":
        if c > EXHAUSTIVE_MAX:
            raise ValueError(f"exhaustive mode supports at most {EXHAUSTIVE_MAX} tokens, got {c}")
        states = _all_states(c)
    elif mode == "sampled":
        total = 2 ** c - 1 if c < 62 else math.inf
        if samples >= total:
            states = _all_states(c)
        else:
            rng = rng or np.random.default_rng(0)
            seen = {bytes(np.packbits(np.ones(c, dtype=bool)))}
            rows = [np.ones(c, dtype=bool)]
            while len(rows) < samples:
                st = rng.random(c) < rng.random()
                key = bytes(np.packbits(st))
                if st.any() and key not in seen:
                    seen.add(key)
                    rows.append(st)
            states = np.array(rows)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    vals, grads = eval_states(agg, tok, states)
    norms = np.linalg.norm(grads, axis=2)  # [m, c]
    g = norms.max(axis=0)
    tok_norm = np.linalg.norm(tok, axis=1)
    index = {bytes(np.packbits(st)): j for j, st in enumerate(states)}
    for j, st in enumerate(states):
        if st.sum() < 2:
            continue
        for i in np.flatnonzero(st):
            other = st.copy()
            other[i] = False
            k = index.get(bytes(np.packbits(other)))
            if k is not None and tok_norm[i] > 0:
                g[i] = max(g[i], abs(vals[j] - vals[k]) / tok_norm[i])
    G = float(g.sum())
    w = g / G if G > 0 else np.full(c, 1.0 / c)
    R = float(max(tok_norm.max(), 0.0))  # z_0 = 0 contributes norm 0
    psi = np.array([best_k_mass(w, K)[1] for K in range(c + 1)])
    advisory = mode == "sampled" and len(states) < 2 ** c - 1
    return InfluenceProfile(w, g, G, R, psi, mode, len(states), advisory)


def best_k_mass(w, K: int) -> tuple:
    """(covered, psi): sum of the K largest weights and the remaining mass."""
    w = np.asarray(w, dtype=np.float64)
    K = min(max(int(K), 0), len(w))
    # fsum: correctly rounded, so equal multisets give bit-equal masses
    covered = math.fsum(np.sort(w)[::-1][:K].tolist())
    total = math.fsum(w.tolist())
    return covered, max(total - covered, 0.0) if K < len(w) else 0.0


def best_k_mass_exhaustive(w, K: int) -> float:
    """max over all K-subsets of the subset mass (oracle, small n only)."""
    w = [float(v) for v in w]
    K = min(max(int(K), 0), len(w))
    return max((math.fsum(c) for c in itertools.combinations(w, K)), default=0.0)


def selector_gap(profile: InfluenceProfile, S) -> tuple:
    """(eps_K, delta_K) for selected indices S (positions among real tokens)."""
    S = np.asarray(S, dtype=np.int64)
    if len(S) and (S.min() < 0 or S.max() >= profile.count):
        raise IndexError("selector_gap: index out of range")
    mass = profile.covered_mass(S)
    eps = 1.0 - mass
    delta = best_k_mass(profile.w, len(S))[0] - mass
    if delta < -1e-12:
        raise AssertionError(f"selector beat the best-K mass (delta={delta})")
    return eps, max(delta, 0.0)


def masked_value(agg, tok: np.ndarray, keep: np.ndarray) -> float:
    with nc.no_grad():
        return float(_f(agg)(tok[None], keep[None]).data[0])


def bound_check(agg, tokens, S, mask=None, profile: InfluenceProfile | None = None) -> BoundReport:
    """gap = |f(all) - f(S)| against 2 * G * R * eps_K, plus the telescoping chain sum."""
    tok = _real_tokens(tokens, mask)
    c = len(tok)
    S = np.unique(np.asarray(S, dtype=np.int64))
    if len(S) == 0:
        raise ValueError("bound_check: S must be nonempty")
    if profile is None:
        profile = influence_weights(agg, tok, mode="exhaustive" if c <= EXHAUSTIVE_MAX else "sampled")
    eps, delta = selector_gap(profile, S)
    keep = np.zeros(c, dtype=bool)
    keep[S] = True
    full = masked_value(agg, tok, np.ones(c, dtype=bool))
    gap = abs(full - masked_value(agg, tok, keep))
    # remove tokens outside S one at a time, in index order
    chain, cur, prev = 0.0, np.ones(c, dtype=bool), full
    for i in np.flatnonzero(~keep):
        cur[i] = False
        v = masked_value(agg, tok, cur)
        chain += abs(prev - v)
        prev = v
    bound = 2.0 * profile.G * profile.R * eps
    ok = gap <= bound * (1 + 1e-6) + 1e-12
    return BoundReport(gap, bound, profile.G, profile.R, eps, delta, chain, ok, profile.advisory)


# -- sweeps ----------------------------------------------------------------------------

def _sig(z):
    return nc._sigmoid_np(np.asarray(z, dtype=np.float64))


def _summ(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    return float(np.nanmean(v)), float(np.nanstd(v, ddof=1)) if len(v) > 1 else 0.0


def sweep_k(runs: list, Ks=(8, 16, 32, 64, 128, 256, 512), mode: str = "truncate") -> SweepResult:
    """Per-K metrics, mean and std over runs.

    truncate: each run is (model, preps, labels); the fixed model sees only
      the first K selected tokens of each bag.
    retrain: each run is {K: (model, preps, labels)} with one model per K.
    """
    if mode not in ("truncate", "retrain"):
        raise ValueError("sweep_k mode must be truncate or retrain")
    rows = []
    full_cache = {}
    for K in Ks:
        pr, f1, gaps = [], [], []
        for r, run in enumerate(runs):
            if mode == "truncate":
                model, preps, labels = run
                if r not in full_cache:
                    full_cache[r] = _sig(model.predict_prepared(preps))
                full = full_cache[r]
                yk = _sig(model.predict_prepared(preps, K))
            else:
                if K not in run:
                    raise KeyError(f"retrain sweep: no model for K={K}")
                model, preps, labels = run[K]
                yk = _sig(model.predict_prepared(preps))
                ref = run[max(run)]
                full = _sig(ref[0].predict_prepared(ref[1]))
            empty = np.array([p.n == 0 for p in preps])
            yk = np.where(empty, 0.5, yk)
            full = np.where(empty, 0.5, full)
            m = metrics(yk, labels)
            pr.append(m["pr_auc"])
            f1.append(m["f1_05"])
            gaps.append(float(np.mean(np.abs(full - yk))))
        row = {"K": K}
        for name, vals in (("pr_auc", pr), ("f1_05", f1), ("gap", gaps)):
            row[f"{name}_mean"], row[f"{name}_std"] = _summ(vals)
        row["seeds"] = len(runs)
        rows.append(row)
    return SweepResult("K", list(Ks), mode, rows)


def sweep_n(runs: list, n_caps=(64, 128, 256, 512, 1024, 2048), k_star: int = 64) -> SweepResult:
    """Metrics per visible-pool cap at a fixed budget.

    Each run is (model, bags) or (model, bags, cheap) where ``cheap`` caches
    the per-bag cheap scan (it does not depend on the cap).
    """
    from dataclasses import replace

    runs = [tuple(r) if len(r) == 3 else (r[0], r[1], [r[0].cheap_scan(b) if b.n else None for b in r[1]])
            for r in runs]
    rows = []
    for cap in n_caps:
        pr, f1 = [], []
        for model, bags, cheap in runs:
            sel = replace(model.selector, kmax=k_star)
            preps = [model.prepare(b, sel, cheap=c, n_cap=cap) for b, c in zip(bags, cheap)]
            z = model.predict_prepared(preps)
            yhat = np.where([p.n == 0 for p in preps], 0.5, _sig(z))
            m = metrics(yhat, [b.label for b in bags])
            pr.append(m["pr_auc"])
            f1.append(m["f1_05"])
        row = {"n_cap": cap}
        for name, vals in (("pr_auc", pr), ("f1_05", f1)):
            row[f"{name}_mean"], row[f"{name}_std"] = _summ(vals)
        row["seeds"] = len(runs)
        rows.append(row)
    return SweepResult("n_cap", list(n_caps), "truncate", rows)


def fuzz_bound(cases: int = 200, seed: int = 0, max_count: int = 10, d_tok: int = 6) -> list:
    """Bound checks on random small aggregators, tokens, and subsets (exhaustive mode).

    Returns [(count, K, BoundReport)].
    """
    from .aggregator import AggConfig, Aggregator

    out = []
    root = nc.RngState(seed).child("fuzz")
    for c in range(cases):
        rs = root.child(f"case{c}")
        g = rs.generator()
        agg = Aggregator(AggConfig(d_tok=d_tok, width=8, heads=2, depth=int(g.integers(0, 3)), ff=16),
                         rs.child("agg"))
        count = int(g.integers(2, max_count + 1))
        tok = g.normal(scale=float(g.uniform(0.2, 2.0)), size=(count, d_tok))
        K = int(g.integers(1, count + 1))
        S = np.sort(g.choice(count, size=K, replace=False))
        out.append((count, K, bound_check(agg, tok, S)))
    return out
