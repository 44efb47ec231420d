"""Candidate target-site generation from a (miRNA, 3'UTR) pair.

A 40-nt window slides over the UTR with stride 1. Each window is scored by
a local alignment of the miRNA extended seed (5' positions 1-10) against the
window read 3'->5', and windows scoring at least the threshold become
candidates with a 10x50 one-hot alignment encoding.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

WINDOW = 40
SEED_LEN = 10
ENC_WIDTH = 50
ENC_CHANNELS = 10
DEFAULT_THRESHOLD = 6.0
GAP_SCORE = -2.0

ALPHABET = "ACGU"
_CODE = {c: i for i, c in enumerate(ALPHABET)}
GAP = "-"
_ENC_SYMBOLS = "ACGU-"

BAG_SCHEMA = "brmil.bags"
BAG_SCHEMA_VERSION = 1


class SequenceError(ValueError):
    pass


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class NucSeq:
    symbols: str
    role: str = "utr"

    @classmethod
    def parse(cls, text: str, role: str = "utr") -> "NucSeq":
        s = "".join(text.split()).upper().replace("T", "U")
        if not s:
            raise SequenceError(f"empty {role} sequence")
        bad = set(s) - set(ALPHABET)
        if bad:
            raise SequenceError(f"invalid symbol(s) {''.join(sorted(bad))!r} in {role} sequence")
        return cls(s, role)

    def codes(self) -> np.ndarray:
        return np.array([_CODE[c] for c in self.symbols], dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.symbols)


def _as_seq(s, role: str) -> NucSeq:
    return s if isinstance(s, NucSeq) else NucSeq.parse(s, role)


@dataclass
class Alignment:
    score: float
    seed_span: tuple  # [i0, i1) in the miRNA
    window_span: tuple  # [j0, j1) in the reversed window
    mirna_row: str  # gapped aligned segments
    window_row: str


@dataclass
class CtsCandidate:
    index: int
    window_start: int
    p: float
    s_esa: float
    x: np.ndarray


@dataclass
class Bag:
    """Candidates for one pair, held as parallel arrays (index order = window order)."""

    pair_id: str
    x: np.ndarray
    p: np.ndarray
    s_esa: np.ndarray
    window_start: np.ndarray
    label: int | None = None
    inst_label: np.ndarray | None = None
    cluster: np.ndarray | None = None
    notes: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.p)

    @property
    def candidates(self) -> list:
        return [CtsCandidate(i, int(self.window_start[i]), float(self.p[i]),
                             float(self.s_esa[i]), self.x[i]) for i in range(self.n)]

    @property
    def u(self) -> np.ndarray:
        return np.stack([self.p, self.s_esa], axis=1) if self.n else np.zeros((0, 2))

    def subset(self, idx) -> "Bag":
        idx = np.asarray(idx, dtype=np.intp)
        return Bag(self.pair_id, self.x[idx], self.p[idx], self.s_esa[idx], self.window_start[idx],
                   self.label,
                   None if self.inst_label is None else self.inst_label[idx],
                   None if self.cluster is None else self.cluster[idx])


def empty_bag(pair_id: str, label=None) -> Bag:
    return Bag(pair_id, np.zeros((0, ENC_CHANNELS, ENC_WIDTH)), np.zeros(0), np.zeros(0),
               np.zeros(0, dtype=np.int64), label)


# -- alignment ---------------------------------------------------------------

def _pair(a: str, b: str) -> float:
    if (a, b) in (("A", "U"), ("U", "A"), ("C", "G"), ("G", "C")):
        return 1.0
    if (a, b) in (("G", "U"), ("U", "G")):
        return 0.5
    return 0.0


def align_seed(mirna, window) -> Alignment:
    """Local alignment of the miRNA seed against the reversed window, with traceback."""
    mirna = _as_seq(mirna, "miRNA")
    window = _as_seq(window, "utr")
    if len(window) != WINDOW:
        raise SequenceError(f"window must be {WINDOW} nt, got {len(window)}")
    seed = mirna.symbols[:SEED_LEN]
    rev = window.symbols[::-1]
    ns, nw = len(seed), len(rev)
    H = np.zeros((ns + 1, nw + 1))
    best, bi, bj = 0.0, 0, 0
    for i in range(1, ns + 1):
        for j in range(1, nw + 1):
            h = max(H[i - 1, j - 1] + _pair(seed[i - 1], rev[j - 1]),
                    H[i - 1, j] + GAP_SCORE, H[i, j - 1] + GAP_SCORE, 0.0)
            H[i, j] = h
            if h > best:
                best, bi, bj = h, i, j
    mrow, wrow = [], []
    i, j = bi, bj
    while i > 0 and j > 0 and H[i, j] > 0:
        h = H[i, j]
        if h == H[i - 1, j - 1] + _pair(seed[i - 1], rev[j - 1]):
            mrow.append(seed[i - 1])
            wrow.append(rev[j - 1])
            i, j = i - 1, j - 1
        elif h == H[i - 1, j] + GAP_SCORE:
            mrow.append(seed[i - 1])
            wrow.append(GAP)
            i -= 1
        else:
            mrow.append(GAP)
            wrow.append(rev[j - 1])
            j -= 1
    return Alignment(float(best), (i, bi), (j, bj), "".join(reversed(mrow)), "".join(reversed(wrow)))


def esa_score(mirna, window) -> float:
    return align_seed(mirna, window).score


def alignment_layout(mirna, window, aln: Alignment) -> tuple:
    """Full gapped rows: flanks around the aligned core, reversed window on the bottom row."""
    mirna = _as_seq(mirna, "miRNA").symbols
    rev = _as_seq(window, "utr").symbols[::-1]
    i0, i1 = aln.seed_span
    j0, j1 = aln.window_span
    left = max(i0, j0)
    top = GAP * (left - i0) + mirna[:i0] + aln.mirna_row
    bot = GAP * (left - j0) + rev[:j0] + aln.window_row
    tail_m, tail_w = mirna[i1:], rev[j1:]
    right = max(len(tail_m), len(tail_w))
    top += tail_m + GAP * (right - len(tail_m))
    bot += tail_w + GAP * (right - len(tail_w))
    return top, bot


def encode_cts(mirna, window, aln: Alignment | None = None) -> np.ndarray:
    """One-hot [10, 50]: channels 0-4 miRNA row, 5-9 window row (A, C, G, U, gap)."""
    if aln is None:
        aln = align_seed(mirna, window)
    top, bot = alignment_layout(mirna, window, aln)
    if len(top) > ENC_WIDTH:
        raise EncodingError(f"alignment width {len(top)} exceeds {ENC_WIDTH}")
    x = np.zeros((ENC_CHANNELS, ENC_WIDTH))
    cols = np.arange(len(top))
    x[[_ENC_SYMBOLS.index(c) for c in top], cols] = 1.0
    x[[5 + _ENC_SYMBOLS.index(c) for c in bot], cols] = 1.0
    return x


def decode_cts(x: np.ndarray) -> tuple:
    """Inverse of ``encode_cts``: the two gapped rows, stopping at padding."""
    top, bot = [], []
    for col in np.asarray(x).T:
        if not col.any():
            break
        top.append(_ENC_SYMBOLS[int(np.argmax(col[:5]))])
        bot.append(_ENC_SYMBOLS[int(np.argmax(col[5:]))])
    return "".join(top), "".join(bot)


# -- scanning ----------------------------------------------------------------

def scan_scores(mirna, utr) -> np.ndarray:
    """ESA score of every stride-1 window (compiled kernel when available)."""
    mirna = _as_seq(mirna, "miRNA")
    utr = _as_seq(utr, "utr")
    if len(utr) < WINDOW:
        raise SequenceError(f"sequence shorter than window ({len(utr)} < {WINDOW})")
    return kernels.esa_scan(mirna.codes()[:SEED_LEN], utr.codes(), WINDOW)


def scan(mirna, utr, threshold: float = DEFAULT_THRESHOLD, pair_id: str = "pair",
         label: int | None = None) -> Bag:
    mirna = _as_seq(mirna, "miRNA")
    utr = _as_seq(utr, "utr")
    scores = scan_scores(mirna, utr)
    L = len(utr)
    xs, ps, ss, starts, notes = [], [], [], [], []
    for s in np.flatnonzero(scores >= threshold):
        win = NucSeq(utr.symbols[s:s + WINDOW])
        aln = align_seed(mirna, win)
        try:
            x = encode_cts(mirna, win, aln)
        except EncodingError as exc:
            notes.append(f"window {s}: {exc}")
            log.debug("rejecting window %d of %s: %s", s, pair_id, exc)
            continue
        xs.append(x)
        ps.append((s + WINDOW / 2) / L)
        ss.append(aln.score)
        starts.append(int(s))
    if not xs:
        bag = empty_bag(pair_id, label)
        bag.notes = notes
        return bag
    return Bag(pair_id, np.stack(xs), np.array(ps), np.array(ss),
               np.array(starts, dtype=np.int64), label, notes=notes)


# -- FASTA -------------------------------------------------------------------

def read_fasta(path) -> list:
    """Return [(id, NucSeq)]; raises SequenceError naming the bad record."""
    records, name, chunks, start = [], None, [], 0

    def flush():
        if name is None:
            return
        try:
            records.append((name, NucSeq.parse("".join(chunks))))
        except SequenceError as exc:
            raise SequenceError(f"{path}:{start}: record {name!r}: {exc}") from None

    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith(";"):
                continue
            if line.startswith(">"):
                flush()
                fields = line[1:].split()
                name = fields[0] if fields else f"seq{lineno}"
                chunks, start = [], lineno
            elif name is None:
                raise SequenceError(f"{path}:{lineno}: sequence data before first header")
            else:
                chunks.append(line)
    flush()
    return records


# -- bag interchange ---------------------------------------------------------

def _pack_x(x: np.ndarray) -> tuple:
    if np.all((x == 0) | (x == 1)):
        return "bits", base64.b64encode(np.packbits(x.astype(np.uint8).ravel()).tobytes()).decode()
    return "f8", base64.b64encode(np.ascontiguousarray(x, dtype="<f8").tobytes()).decode()


def _unpack_x(enc: str, data: str) -> np.ndarray:
    raw = base64.b64decode(data)
    size = ENC_CHANNELS * ENC_WIDTH
    if enc == "bits":
        v = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:size].astype(np.float64)
    elif enc == "f8":
        v = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    else:
        raise ValueError(f"unknown tensor encoding {enc!r}")
    return v.reshape(ENC_CHANNELS, ENC_WIDTH)


def bag_to_record(bag: Bag) -> dict:
    cands = []
    for i in range(bag.n):
        enc, data = _pack_x(bag.x[i])
        c = {"window_start": int(bag.window_start[i]), "p": float(bag.p[i]),
             "s_esa": float(bag.s_esa[i]), "enc": enc, "x": data}
        if bag.inst_label is not None:
            c["y"] = int(bag.inst_label[i])
        if bag.cluster is not None:
            c["cluster"] = int(bag.cluster[i])
        cands.append(c)
    return {"pair_id": bag.pair_id, "label": None if bag.label is None else int(bag.label),
            "n": bag.n, "candidates": cands}


def record_to_bag(rec: dict) -> Bag:
    cands = rec.get("candidates", [])
    if rec.get("n", len(cands)) != len(cands):
        raise ValueError(f"record {rec.get('pair_id')!r}: n does not match candidate count")
    if not cands:
        return empty_bag(rec["pair_id"], rec.get("label"))
    x = np.stack([_unpack_x(c.get("enc", "bits"), c["x"]) for c in cands])
    bag = Bag(rec["pair_id"], x, np.array([c["p"] for c in cands], dtype=np.float64),
              np.array([c["s_esa"] for c in cands], dtype=np.float64),
              np.array([c["window_start"] for c in cands], dtype=np.int64), rec.get("label"))
    if all("y" in c for c in cands):
        bag.inst_label = np.array([c["y"] for c in cands], dtype=np.int64)
    if all("cluster" in c for c in cands):
        bag.cluster = np.array([c["cluster"] for c in cands], dtype=np.int64)
    return bag


def write_bags(path, bags: Iterable[Bag]) -> int:
    n = 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": BAG_SCHEMA, "version": BAG_SCHEMA_VERSION}) + "\n")
        for bag in bags:
            fh.write(json.dumps(bag_to_record(bag), separators=(",", ":")) + "\n")
            n += 1
    return n


def iter_bags(path) -> Iterator[Bag]:
    with open(path) as fh:
        header = json.loads(fh.readline() or "{}")
        if header.get("schema") != BAG_SCHEMA:
            raise ValueError(f"{path}: not a bag file (schema {header.get('schema')!r})")
        if header.get("version") != BAG_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported bag schema version {header.get('version')}")
        for lineno, line in enumerate(fh, 2):
            if line.strip():
                try:
                    yield record_to_bag(json.loads(line))
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None


def read_bags(path) -> list:
    return list(iter_bags(path))
