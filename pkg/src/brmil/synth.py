"""Planted-signal bags for supervised runs without real transcriptome data.

Each candidate's 10x50 tensor is built directly: a per-pair random 22-nt
miRNA row and a 40-nt random window row, gap-padded to width 50. A signal
candidate carries one of ``m_types`` fixed 8-mer motifs at the start of its
window. Motifs come from ``motif_seed`` so separately generated splits share
them.

Labels:
  single       Y=1 iff the bag holds any signal candidate
  cooperative  Y=1 iff at least ``k`` distinct motif types are present, each
               in its own position bin; negatives hold 1..k-1 types, so a
               max over per-candidate scores cannot separate the classes
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import RngState
from .seqscan import ENC_CHANNELS, ENC_WIDTH, WINDOW, Bag

MIRNA_LEN = 22
MOTIF_LEN = 8


@dataclass(frozen=True)
class SynthSpec:
    n_pairs: int = 200
    pool_median: float = 256.0
    pool_sigma: float = 0.5
    n_max: int = 2048
    rule: str = "cooperative"  # cooperative | single
    k: int = 2
    m_types: int = 3
    copies: int = 1
    redundancy: int = 0  # extra exact duplicates of one signal site (same bin)
    pos_frac: float = 0.5
    noise: float = 0.0  # bag-label flip probability
    bins: int = 16
    utr_len: int = 8192
    motif_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 0 or self.n_max < 1 or self.pool_median <= 0 or self.pool_sigma < 0:
            raise ValueError("synth: sizes must be positive")
        if self.rule not in ("cooperative", "single"):
            raise ValueError("synth.rule must be cooperative or single")
        if not 1 <= self.k <= self.m_types:
            raise ValueError("synth: need 1 <= k <= m_types")
        if self.m_types > self.bins:
            raise ValueError("synth: m_types must not exceed bins")
        if self.copies < 1 or self.redundancy < 0:
            raise ValueError("synth: copies >= 1 and redundancy >= 0")
        if not 0 <= self.noise <= 0.5 or not 0 < self.pos_frac < 1:
            raise ValueError("synth: noise in [0, 0.5], pos_frac in (0, 1)")
        if self.utr_len < WINDOW * self.bins:
            raise ValueError("synth.utr_len too short for the bin layout")


def motifs(spec: SynthSpec) -> np.ndarray:
    """[m_types, 8] nucleotide codes (0..3), pairwise distinct."""
    g = RngState(spec.motif_seed).child("motifs").generator()
    while True:
        mot = g.integers(0, 4, size=(spec.m_types, MOTIF_LEN))
        if len({tuple(r) for r in mot}) == spec.m_types:
            return mot


def pool_size(g: np.random.Generator, spec: SynthSpec, needed: int) -> int:
    n = int(round(math.exp(g.normal(math.log(spec.pool_median), spec.pool_sigma))))
    return int(min(max(n, needed, 1), max(spec.n_max, needed)))


def _starts_in_bin(g, spec: SynthSpec, b: int, count: int) -> np.ndarray:
    # p = (start + W/2) / L falls in bin b  <=>  start in [b*L/B - W/2, (b+1)*L/B - W/2)
    lo = max(int(math.ceil(b * spec.utr_len / spec.bins - WINDOW / 2)), 0)
    hi = min(int(math.ceil((b + 1) * spec.utr_len / spec.bins - WINDOW / 2)), spec.utr_len - WINDOW + 1)
    return g.integers(lo, hi, size=count)


def make_bag(g: np.random.Generator, spec: SynthSpec, mot: np.ndarray, label: int, idx: int) -> Bag:
    if spec.rule == "single":
        ntypes = int(g.integers(1, spec.m_types + 1)) if label else 0
    elif label:
        ntypes = int(g.integers(spec.k, spec.m_types + 1))
    else:
        ntypes = int(g.integers(1, spec.k))
    types = g.permutation(spec.m_types)[:ntypes]
    bins = g.permutation(spec.bins)[:ntypes]
    n_sig = ntypes * spec.copies + (spec.redundancy if ntypes else 0)
    n = pool_size(g, spec, n_sig)

    # signal sites: one flank sequence per site, duplicated across its copies
    site_type, site_start, site_group = [], [], []
    for j, (t, b) in enumerate(zip(types, bins)):
        reps = spec.copies + (spec.redundancy if j == 0 else 0)
        site_type += [int(t)] * reps
        site_start += _starts_in_bin(g, spec, int(b), reps).tolist()
        site_group += [j] * reps
    n_dec = n - len(site_type)
    starts = np.r_[np.array(site_start, dtype=np.int64),
                   g.integers(0, spec.utr_len - WINDOW + 1, size=n_dec)]
    ctype = np.r_[np.array(site_type, dtype=np.int64), np.full(n_dec, -1)]
    group = np.r_[np.array(site_group, dtype=np.int64), -1 - np.arange(n_dec)]

    window = g.integers(0, 4, size=(n, WINDOW))
    flanks = g.integers(0, 4, size=(max(ntypes, 1), WINDOW))
    sig = ctype >= 0
    window[sig] = flanks[group[sig]]
    window[sig, :MOTIF_LEN] = mot[ctype[sig]]
    mirna = g.integers(0, 4, size=MIRNA_LEN)
    s_esa = g.integers(12, 21, size=n) / 2.0  # ESA-like scores on the 0.5 grid in [6, 10]

    order = np.lexsort((np.arange(n), starts))  # window order
    starts, ctype, group, window, s_esa = starts[order], ctype[order], group[order], window[order], s_esa[order]
    sig = ctype >= 0

    x = np.zeros((n, ENC_CHANNELS, ENC_WIDTH), dtype=np.uint8)
    x[:, mirna, np.arange(MIRNA_LEN)] = 1
    x[:, 4, MIRNA_LEN:] = 1
    rows = np.arange(n)[:, None]
    x[rows, 5 + window, np.arange(WINDOW)[None, :]] = 1
    x[:, 9, WINDOW:] = 1

    # cluster ids: signal groups share one id, every decoy is its own cluster
    _, cluster = np.unique(group, return_inverse=True)
    y = int(label)
    if spec.noise and g.random() < spec.noise:
        y = 1 - y
    p = (starts + WINDOW / 2) / spec.utr_len
    bag = Bag(f"synth{spec.seed}_{idx:06d}", x, p, s_esa, starts, y,
              sig.astype(np.int64), cluster.astype(np.int64))
    bag.motif_types = ctype
    return bag


def gen_synthetic(spec: SynthSpec) -> list:
    """Deterministic list of bags for ``spec``."""
    mot = motifs(spec)
    root = RngState(spec.seed).child("synth")
    g_lab = root.child("labels").generator()
    labels = (g_lab.random(spec.n_pairs) < spec.pos_frac).astype(int)
    return [make_bag(root.child(f"bag{i}").generator(), spec, mot, int(labels[i]), i)
            for i in range(spec.n_pairs)]


def instance_set(bags: list, rng: np.random.Generator, decoys_per_signal: float = 1.0,
                 max_items: int | None = None) -> tuple:
    """Candidate-level training items (x, u, y) drawn from bags with instance labels.

    Keeps every signal candidate and a random decoy sample of matching size.
    """
    xs, us, ys = [], [], []
    for bag in bags:
        if bag.n == 0 or bag.inst_label is None:
            continue
        pos = np.flatnonzero(bag.inst_label == 1)
        neg = np.flatnonzero(bag.inst_label == 0)
        take = min(len(neg), max(1, int(round(decoys_per_signal * max(len(pos), 1)))))
        idx = np.r_[pos, rng.choice(neg, size=take, replace=False)] if take else pos
        xs.append(bag.x[idx])
        us.append(bag.u[idx])
        ys.append(bag.inst_label[idx])
    x, u, y = np.concatenate(xs), np.concatenate(us), np.concatenate(ys)
    if max_items is not None and len(y) > max_items:
        keep = np.sort(rng.choice(len(y), size=max_items, replace=False))
        x, u, y = x[keep], u[keep], y[keep]
    return x, u, y
