"""Budgeted, deterministic subset selection over cheap signals.

Variants:
  S0  top-K by cheap logit
  S1  top-K1 plus position-binned quota picks (no embedding dedup)
  S2  S1 plus SimHash dedup inside each bin (default)

Everywhere a tie has to be broken, the lower candidate index wins. That rule
is data-independent, so the selected multiset does not depend on input
order when scores are distinct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

VARIANTS = ("S0", "S1", "S2")


@dataclass(frozen=True)
class SelectorConfig:
    kmax: int = 64
    rho: float = 0.5
    bins: int = 16
    heap_size: int = 8
    hash_bits: int = 8
    per_key_cap: int = 2
    quota_top: int = 4
    temperature: float = 1.0
    variant: str = "S2"
    simhash: str = "first_b"  # first_b | random
    simhash_seed: int = 0

    def __post_init__(self):
        checks = [
            (self.kmax >= 1, "kmax must be >= 1"),
            (0.0 <= self.rho <= 1.0, "rho must lie in [0, 1]"),
            (self.bins >= 1, "bins must be >= 1"),
            (self.heap_size >= 1, "heap_size must be >= 1"),
            (self.hash_bits >= 1, "hash_bits must be >= 1"),
            (self.per_key_cap >= 1, "per_key_cap must be >= 1"),
            (self.quota_top >= 1, "quota_top must be >= 1"),
            (self.temperature > 0, "temperature must be > 0"),
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}"),
            (self.simhash in ("first_b", "random"), "simhash must be first_b or random"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"selector.{msg}")


@dataclass
class SelectionResult:
    S: np.ndarray
    K: int
    K1: int
    K2: int
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.S)


def order_desc(z: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
    """Indices sorted by descending z, ties by ascending index."""
    z = np.asarray(z, dtype=np.float64)
    if idx is None:
        idx = np.arange(len(z))
    idx = np.asarray(idx, dtype=np.int64)
    return idx[np.lexsort((idx, -z[idx]))]


def step_a_topk(z: np.ndarray, k1: int) -> np.ndarray:
    if k1 <= 0:
        return np.zeros(0, dtype=np.int64)
    return order_desc(z)[:k1]


def bin_of(p: np.ndarray, nbins: int) -> np.ndarray:
    return np.clip((np.asarray(p, dtype=np.float64) * nbins).astype(np.int64), 0, nbins - 1)


def step_b_bins(p: np.ndarray, z: np.ndarray, nbins: int, m: int,
                stats: dict | None = None) -> dict:
    """Per-bin top-m candidates by z (heap per bin). Returns {bin: [idx, ...]} best first."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    heaps, sizes, comps = kernels.bin_topm(p, z, nbins, m)
    out = {}
    for b in range(nbins):
        if sizes[b]:
            out[b] = order_desc(z, heaps[b, :sizes[b]]).tolist()
    if stats is not None:
        stats["heap_comparisons"] = int(comps)
        stats["bin_occupancy"] = {b: len(v) for b, v in out.items()}
    return out


def simhash_keys(h: np.ndarray, bits: int, mode: str = "first_b", seed: int = 0) -> np.ndarray:
    """Integer key per row from sign bits of ``bits`` coordinates (or random projections)."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[None]
    if mode == "random":
        proj = np.random.Generator(np.random.Philox(seed)).normal(size=(h.shape[1], bits))
        signs = (h @ proj) > 0
    else:
        use = min(bits, h.shape[1])
        signs = h[:, :use] > 0
    weights = 1 << np.arange(signs.shape[1], dtype=np.int64)
    return (signs.astype(np.int64) * weights).sum(axis=1)


def step_c_dedup(bins: dict, h: np.ndarray, z: np.ndarray, bits: int, cap: int,
                 mode: str = "first_b", seed: int = 0, stats: dict | None = None) -> dict:
    """Within each bin keep at most ``cap`` candidates per SimHash key, best z first."""
    out, removed = {}, 0
    for b, members in bins.items():
        members = order_desc(z, members)
        keys = simhash_keys(h[members], bits, mode, seed)
        seen: dict = {}
        keep = []
        for i, k in zip(members.tolist(), keys.tolist()):
            if seen.get(k, 0) < cap:
                seen[k] = seen.get(k, 0) + 1
                keep.append(i)
            else:
                removed += 1
        out[b] = keep
    if stats is not None:
        stats["dedup_removed"] = removed
    return out


def largest_remainder(weights, seats: int, caps=None) -> list:
    """Hamilton apportionment of ``seats`` over ``weights`` with optional per-party caps.

    Ties in remainders go to the earlier party. Seats that would exceed a cap
    are re-apportioned over the uncapped parties.
    """
    w = [float(x) for x in weights]
    n = len(w)
    caps = [math.inf] * n if caps is None else list(caps)
    seats = int(min(seats, sum(caps)))
    alloc = [0] * n
    open_ = [i for i in range(n) if caps[i] > 0]
    left = seats
    while left > 0 and open_:
        total = sum(w[i] for i in open_)
        if total <= 0:
            share = {i: left / len(open_) for i in open_}
        else:
            share = {i: left * w[i] / total for i in open_}
        add = {i: int(math.floor(share[i])) for i in open_}
        rem = left - sum(add.values())
        for i in sorted(open_, key=lambda i: (-(share[i] - add[i]), i))[:rem]:
            add[i] += 1
        overflow = 0
        for i in open_:
            room = caps[i] - alloc[i]
            give = min(add[i], room)
            alloc[i] += give
            overflow += add[i] - give
        open_ = [i for i in open_ if alloc[i] < caps[i]]
        left = overflow
    return alloc


def step_d_quota(bins: dict, z: np.ndarray, k2: int, top_t: int, tau: float,
                 stats: dict | None = None) -> dict:
    """Per-bin quotas proportional to sum(exp(z/tau)) over each bin's top-t.

    Every nonempty bin gets at least one seat when k2 allows it; quotas never
    exceed bin occupancy.
    """
    order = sorted(b for b in bins if bins[b])
    if not order or k2 <= 0:
        return {b: 0 for b in order}
    zmax = max(float(z[bins[b][0]]) for b in order)
    # common shift keeps exp finite; proportions are unchanged
    w = [sum(math.exp((float(z[i]) - zmax) / tau) for i in sorted(bins[b], key=lambda i: (-z[i], i))[:top_t])
         for b in order]
    caps = [len(bins[b]) for b in order]
    alloc = largest_remainder(w, k2, caps)
    if k2 >= len(order):
        for j in range(len(order)):
            if alloc[j] == 0:
                # take a seat from the largest allocation (ties: latest bin) to keep proportionality
                donor = max(range(len(order)), key=lambda t: (alloc[t], t))
                alloc[donor] -= 1
                alloc[j] += 1
    quotas = {b: a for b, a in zip(order, alloc)}
    if stats is not None:
        stats["quotas"] = dict(quotas)
    return quotas


def step_e_merge(s1, s2, z: np.ndarray, K: int, stats: dict | None = None) -> np.ndarray:
    """S = dedup(S1 u S2), then fill by descending z (ties: lower index) up to K."""
    chosen = set(int(i) for i in s1) | set(int(i) for i in s2)
    filled = 0
    if len(chosen) < K:
        for i in order_desc(z).tolist():
            if len(chosen) >= K:
                break
            if i not in chosen:
                chosen.add(i)
                filled += 1
    if stats is not None:
        stats["fill_count"] = filled
    return np.array(sorted(chosen), dtype=np.int64)


def select(cfg: SelectorConfig, z, h, p) -> SelectionResult:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    n = len(z)
    h = np.asarray(h, dtype=np.float64)
    if len(p) != n or len(h) != n:
        raise ValueError(f"select: length mismatch (z={n}, h={len(h)}, p={len(p)})")
    h = h.reshape(n, -1) if n else np.zeros((0, 1))
    K = min(cfg.kmax, n)
    if cfg.variant == "S0":
        K1 = K
    else:
        K1 = int(math.floor(cfg.rho * K))
    K2 = K - K1
    stats: dict = {"variant": cfg.variant, "n": n}
    if n <= cfg.kmax:
        stats["short_circuit"] = True
        return SelectionResult(np.arange(n, dtype=np.int64), K, K1, K2, stats)
    s1 = step_a_topk(z, K1)
    s2: list = []
    if cfg.variant != "S0" and K2 > 0:
        bins = step_b_bins(p, z, cfg.bins, cfg.heap_size, stats)
        if cfg.variant == "S2":
            bins = step_c_dedup(bins, h, z, cfg.hash_bits, cfg.per_key_cap,
                                cfg.simhash, cfg.simhash_seed, stats)
        quotas = step_d_quota(bins, z, K2, cfg.quota_top, cfg.temperature, stats)
        for b, q in quotas.items():
            s2.extend(bins[b][:q])
    S = step_e_merge(s1, s2, z, K, stats)
    return SelectionResult(S, K, K1, K2, stats)


def visible_pool_cap(z, h, p, n_cap: int) -> tuple:
    """Keep the ``n_cap`` highest-z candidates; returns (z, h, p, original_index)."""
    if n_cap < 1:
        raise ValueError("visible_pool_cap: n_cap must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    idx = np.sort(order_desc(z)[:n_cap])
    return z[idx], np.asarray(h)[idx], np.asarray(p)[idx], idx


def covered_mass(S, weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(w[np.asarray(S, dtype=np.int64)].sum() / w.sum()) if len(w) else 0.0


def cluster_covered_mass(S, weights, clusters) -> float:
    """Share of total weight in clusters touched by S (each cluster counted once)."""
    w = np.asarray(weights, dtype=np.float64)
    c = np.asarray(clusters)
    hit = np.isin(c, c[np.asarray(S, dtype=np.int64)])
    return float(w[hit].sum() / w.sum()) if len(w) else 0.0


def signal_cluster_coverage(S, inst_label, clusters) -> float:
    """Share of distinct signal clusters with at least one member in S.

    Every cluster counts once, so redundant copies of one site add nothing.
    """
    y = np.asarray(inst_label).astype(bool)
    c = np.asarray(clusters)
    targets = np.unique(c[y])
    if len(targets) == 0:
        return 1.0
    hit = np.intersect1d(targets, c[np.asarray(S, dtype=np.int64)])
    return float(len(hit) / len(targets))
