"""Masked Set Transformer over selected-candidate tokens.

Token layout is ``[h || z || s_esa || p]``. Padding rows are all-zero and
masked: masked keys get -inf attention logits and masked rows are re-zeroed
after every block, so a padded batch evaluates exactly like the compacted
token set. With ``canonical=True`` the real rows are sorted
lexicographically before the first block, which makes the output
bit-identical under any permutation of the input tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .encoders import uniform_init
from .numcore import Tensor


@dataclass(frozen=True)
class AggConfig:
    d_tok: int = 387
    width: int = 128
    heads: int = 4
    depth: int = 2
    ff: int = 256

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("aggregator.heads must divide aggregator.width")
        if min(self.d_tok, self.width, self.heads, self.ff) < 1 or self.depth < 0:
            raise ValueError("aggregator dimensions must be positive")


@dataclass
class TokenBatch:
    tokens: np.ndarray  # [kmax, d_tok]
    mask: np.ndarray  # [kmax] bool

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def tokenize(h, z, s_esa, p) -> Tensor:
    """Concatenate [h || z || s_esa || p]; accepts one token or a [K, d] batch."""
    h = nc.as_tensor(h)
    single = h.ndim == 1
    if single:
        h = h.reshape(1, -1)
    k = h.shape[0]
    z = nc.as_tensor(z).reshape(k, 1)
    s = Tensor(np.asarray(s_esa, dtype=np.float64).reshape(k, 1))
    p = Tensor(np.asarray(p, dtype=np.float64).reshape(k, 1))
    t = nc.concat([h, z, s, p], axis=1)
    return t.reshape(-1) if single else t


def pack(tokens, kmax: int) -> TokenBatch:
    """Pad a list (or [k, d] array) of tokens to ``kmax`` rows with a mask."""
    tokens = [np.asarray(getattr(t, "data", t), dtype=np.float64) for t in tokens]
    if len(tokens) > kmax:
        raise ValueError(f"{len(tokens)} tokens exceed kmax={kmax}")
    if not tokens:
        raise ValueError("pack: empty token list needs an explicit width; use pack_empty")
    d = tokens[0].shape[-1]
    out = np.zeros((kmax, d))
    out[:len(tokens)] = np.stack(tokens)
    mask = np.zeros(kmax, dtype=bool)
    mask[:len(tokens)] = True
    return TokenBatch(out, mask)


def pack_empty(kmax: int, d_tok: int) -> TokenBatch:
    return TokenBatch(np.zeros((kmax, d_tok)), np.zeros(kmax, dtype=bool))


def truncate_mask(batch: TokenBatch, K: int) -> TokenBatch:
    """Keep the first K real tokens (in packed order); mask and zero the rest."""
    if K <= 0:
        raise ValueError("truncate_mask: K must be positive")
    keep = batch.mask & (np.cumsum(batch.mask) <= K)
    tokens = np.where(keep[:, None], batch.tokens, 0.0)
    return TokenBatch(tokens, keep)


def pad_stack(token_sets: list, length: int | None = None) -> tuple:
    """Stack per-bag token Tensors [k_b, d] into [B, L, d] plus a [B, L] mask."""
    L = length or max(t.shape[0] for t in token_sets)
    d = token_sets[0].shape[1]
    rows, mask = [], np.zeros((len(token_sets), L), dtype=bool)
    for b, t in enumerate(token_sets):
        k = t.shape[0]
        mask[b, :k] = True
        if k < L:
            t = nc.concat([t, Tensor(np.zeros((L - k, d)))], axis=0)
        rows.append(t.reshape(1, L, d))
    return (rows[0] if len(rows) == 1 else nc.concat(rows, axis=0)), mask


def canonical_order(tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-bag row order: real rows sorted lexicographically, padding last."""
    B, L, _ = tokens.shape
    order = np.empty((B, L), dtype=np.intp)
    for b in range(B):
        real = np.flatnonzero(mask[b])
        pad = np.flatnonzero(~mask[b])
        keys = tokens[b, real]
        srt = real[np.lexsort(keys.T[::-1])] if len(real) else real
        order[b] = np.concatenate([srt, pad])
    return order


class Aggregator:
    def __init__(self, cfg: AggConfig = AggConfig(), rng: nc.RngState | int = 0):
        self.cfg = cfg
        if isinstance(rng, int):
            rng = nc.RngState(rng)
        g = rng.child("aggregator").generator()
        w, f = cfg.width, cfg.ff
        p = {"in.w": uniform_init(g, (cfg.d_tok, w), cfg.d_tok), "in.b": np.zeros(w)}
        blocks = [f"sab{i}" for i in range(cfg.depth)] + ["pma"]
        for blk in blocks:
            for m in ("q", "k", "v", "o"):
                p[f"{blk}.{m}.w"] = uniform_init(g, (w, w), w)
                p[f"{blk}.{m}.b"] = np.zeros(w)
            p[f"{blk}.ln1.g"] = np.ones(w)
            p[f"{blk}.ln1.b"] = np.zeros(w)
            p[f"{blk}.ff1.w"] = uniform_init(g, (w, f), w)
            p[f"{blk}.ff1.b"] = np.zeros(f)
            p[f"{blk}.ff2.w"] = uniform_init(g, (f, w), f)
            p[f"{blk}.ff2.b"] = np.zeros(w)
            p[f"{blk}.ln2.g"] = np.ones(w)
            p[f"{blk}.ln2.b"] = np.zeros(w)
        p["pma.seed"] = g.normal(0.0, 1.0, size=(1, 1, w))
        p["out.w"] = uniform_init(g, (w, 1), w)
        p["out.b"] = np.zeros(1)
        self.params = {k: nc.parameter(v, k) for k, v in p.items()}

    # -- blocks --------------------------------------------------------------
    def _heads(self, x: Tensor) -> Tensor:
        B, L, w = x.shape
        H = self.cfg.heads
        return x.reshape(B, L, H, w // H).transpose(0, 2, 1, 3)

    def mab(self, blk: str, xq: Tensor, xkv: Tensor, key_mask: np.ndarray) -> Tensor:
        P = self.params
        H = self.cfg.heads
        dh = self.cfg.width // H
        q = self._heads((xq @ P[f"{blk}.q.w"] + P[f"{blk}.q.b"]) * (1.0 / np.sqrt(dh)))
        k = self._heads(xkv @ P[f"{blk}.k.w"] + P[f"{blk}.k.b"])
        v = self._heads(xkv @ P[f"{blk}.v.w"] + P[f"{blk}.v.b"])
        att = nc.softmax_masked(q @ k.swapaxes(-1, -2), key_mask[:, None, None, :])
        o = (att @ v).transpose(0, 2, 1, 3)
        B, Lq = o.shape[0], o.shape[1]
        o = o.reshape(B, Lq, self.cfg.width) @ P[f"{blk}.o.w"] + P[f"{blk}.o.b"]
        h = nc.layer_norm(xq + o, P[f"{blk}.ln1.g"], P[f"{blk}.ln1.b"])
        ff = nc.relu(h @ P[f"{blk}.ff1.w"] + P[f"{blk}.ff1.b"]) @ P[f"{blk}.ff2.w"] + P[f"{blk}.ff2.b"]
        return nc.layer_norm(h + ff, P[f"{blk}.ln2.g"], P[f"{blk}.ln2.b"])

    def sab(self, i: int, x: Tensor, mask: np.ndarray) -> Tensor:
        out = self.mab(f"sab{i}", x, x, mask)
        return out * mask[:, :, None].astype(np.float64)

    def pma(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return self.mab("pma", self.params["pma.seed"], x, mask).reshape(x.shape[0], self.cfg.width)

    def embed(self, tokens: Tensor, mask: np.ndarray) -> Tensor:
        P = self.params
        m = mask[:, :, None].astype(np.float64)
        x = (tokens @ P["in.w"] + P["in.b"]) * m
        for i in range(self.cfg.depth):
            x = self.sab(i, x, mask)
        return x

    def forward(self, tokens, mask, canonical: bool = True) -> Tensor:
        """tokens [B, L, d_tok] (Tensor or array), mask [B, L] -> z_pair [B]."""
        tokens = nc.as_tensor(tokens)
        mask = np.asarray(mask, dtype=bool)
        if tokens.ndim == 2:
            tokens, mask = tokens.reshape(1, *tokens.shape), mask[None]
        if not np.all(mask.any(axis=1)):
            raise ValueError("aggregator: all-masked bag")
        B, L, d = tokens.shape
        if canonical:
            order = canonical_order(tokens.data, mask)
            flat = (order + (np.arange(B) * L)[:, None]).reshape(-1)
            tokens = nc.take_rows(tokens.reshape(B * L, d), flat).reshape(B, L, d)
            mask = np.take_along_axis(mask, order, axis=1)
        pooled = self.pma(self.embed(tokens, mask), mask)
        return (pooled @ self.params["out.w"] + self.params["out.b"]).reshape(B)

    def pair_forward(self, batch: TokenBatch, canonical: bool = True) -> tuple:
        with nc.no_grad():
            z = self.forward(batch.tokens[None], batch.mask[None], canonical).data[0]
        return float(z), float(nc._sigmoid_np(np.array([z]))[0])

    def predict(self, batches: list, canonical: bool = True) -> np.ndarray:
        if not batches:
            return np.zeros(0)
        tokens = np.stack([b.tokens for b in batches])
        mask = np.stack([b.mask for b in batches])
        with nc.no_grad():
            return self.forward(tokens, mask, canonical).data.copy()

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def attention_flops(K: int, width: int, depth: int = 2) -> int:
    """Multiply-adds in the SAB score and mixing products (the K^2 term)."""
    return depth * 2 * K * K * width + 2 * K * width


def lipschitz_probe(agg: Aggregator, batch: TokenBatch, rng: np.random.Generator,
                    samples: int = 64, scale: float = 1e-3) -> float:
    """max |dz_pair| / ||d token|| over random single-token perturbations."""
    z0, _ = agg.pair_forward(batch)
    real = np.flatnonzero(batch.mask)
    best = 0.0
    for _ in range(samples):
        i = rng.choice(real)
        delta = rng.normal(size=batch.tokens.shape[1])
        delta *= scale / np.linalg.norm(delta)
        tok = batch.tokens.copy()
        tok[i] += delta
        z1, _ = agg.pair_forward(TokenBatch(tok, batch.mask))
        best = max(best, abs(z1 - z0) / scale)
    return best
