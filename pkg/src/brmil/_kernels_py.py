"""Fallback kernels, used when the compiled extension is unavailable.

Same contracts and bit-identical results as ``_kernels.pyx``.
"""

import numpy as np

GAP = -2.0

# rows: miRNA base, cols: target base, codes A C G U
PAIR = np.array([
    [0.0, 0.0, 0.0, 1.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, 0.5],
    [1.0, 0.0, 0.5, 0.0],
])


def esa_scan(seed: np.ndarray, utr: np.ndarray, window: int) -> np.ndarray:
    nwin = len(utr) - window + 1
    if nwin < 1:
        return np.zeros(0)
    # column j of the reversed window, for every window start at once
    starts = np.arange(nwin)
    rev = np.stack([utr[starts + window - j] for j in range(1, window + 1)])  # window x nwin
    prev = np.zeros((window + 1, nwin))
    best = np.zeros(nwin)
    for a in seed:
        cur = np.zeros((window + 1, nwin))
        diag = prev[:-1] + PAIR[a][rev]
        up = prev[1:] + GAP
        base = np.maximum(np.maximum(diag, up), 0.0)
        for j in range(1, window + 1):
            h = np.maximum(base[j - 1], cur[j - 1] + GAP)
            cur[j] = h
        best = np.maximum(best, cur.max(axis=0))
        prev = cur
    return best


def _better(z, a, b):
    return z[a] > z[b] or (z[a] == z[b] and a < b)


def bin_topm(p: np.ndarray, z: np.ndarray, nbins: int, m: int):
    n = len(p)
    heaps = [[] for _ in range(nbins)]
    comps = 0
    zl = z.tolist()
    pl = p.tolist()
    for i in range(n):
        b = int(pl[i] * nbins)
        b = min(max(b, 0), nbins - 1)
        h = heaps[b]
        pos = len(h)
        h.append(i)
        while pos > 0:
            parent = (pos - 1) // 2
            comps += 1
            if _better(zl, h[parent], h[pos]):
                h[parent], h[pos] = h[pos], h[parent]
                pos = parent
            else:
                break
        if len(h) > m:
            # drop the worst (root): bottom-up sift of the last element into the hole
            x = h.pop()
            sz = len(h)
            pos = 0
            while 2 * pos + 1 < sz:
                child = 2 * pos + 1
                if child + 1 < sz:
                    comps += 1
                    if _better(zl, h[child], h[child + 1]):
                        child += 1
                pos = child
            while pos > 0:
                comps += 1
                if _better(zl, h[pos], x):
                    pos = (pos - 1) // 2
                else:
                    break
            while True:
                h[pos], x = x, h[pos]
                if pos == 0:
                    break
                pos = (pos - 1) // 2
    out = np.full((nbins, m), -1, dtype=np.int64)
    sizes = np.zeros(nbins, dtype=np.int64)
    for b, h in enumerate(heaps):
        out[b, :len(h)] = h
        sizes[b] = len(h)
    return out, sizes, comps
