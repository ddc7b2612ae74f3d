"""Brute-force reference implementations shared by the tests."""

import numpy as np


def conv_loop(x, w, b, padding):
    B, C, H, W = x.shape
    co = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho, Wo = H + 2 * padding - 2, W + 2 * padding - 2
    out = np.zeros((B, co, Ho, Wo))
    for n in range(B):
        for o in range(co):
            for r in range(Ho):
                for c in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(C):
                        for i in range(3):
                            for j in range(3):
                                acc += xp[n, ci, r + i, c + j] * w[o, ci, i, j]
                    out[n, o, r, c] = acc
    return out


def pool_loop(x):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // 2, W // 2))
    for n in range(B):
        for ci in range(C):
            for r in range(H // 2):
                for c in range(W // 2):
                    out[n, ci, r, c] = max(x[n, ci, 2 * r + i, 2 * c + j] for i in (0, 1) for j in (0, 1))
    return out


def dense_loop(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = b[o] + sum(x[n, i] * w[o, i] for i in range(x.shape[1]))
    return out


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


def exact_mbd(gray: np.ndarray) -> np.ndarray:
    """Minimum barrier over every simple 4-connected path to the border.

    A path stops at the first border pixel it reaches: extending it further
    can only widen its max-min range. Branch-and-bound on the running range
    keeps the enumeration small on 5x5 grids.
    """
    H, W = gray.shape
    out = np.zeros((H, W))

    def border(r, c):
        return r in (0, H - 1) or c in (0, W - 1)

    for r0 in range(1, H - 1):
        for c0 in range(1, W - 1):
            best = [np.inf]

            def dfs(r, c, hi, lo, seen):
                if hi - lo >= best[0]:
                    return
                if border(r, c):
                    best[0] = hi - lo
                    return
                for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if (nr, nc) not in seen:
                        v = gray[nr, nc]
                        seen.add((nr, nc))
                        dfs(nr, nc, max(hi, v), min(lo, v), seen)
                        seen.remove((nr, nc))

            v0 = gray[r0, c0]
            dfs(r0, c0, v0, v0, {(r0, c0)})
            out[r0, c0] = best[0]
    return out
