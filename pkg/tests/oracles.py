"""Independent reference computations used as test oracles.

Nothing here imports the code under test except where a callable is passed in.
"""

import itertools
import math
from fractions import Fraction

import numpy as np


def naive_conv2d(x, w, stride=1, padding=0):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, ch, i * stride + di, j * stride + dj] * w[o, ch, di, dj]
                    out[b, o, i, j] = acc
    return out


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out


def central_difference(f, arrays, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in itertools.product(*[range(s) for s in arr.shape]):
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-12):
    """||a - b|| / max(||a||, ||b||), the usual gradient-check measure."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def sorted_smallest(values, count):
    """Brute force: indices of the ``count`` smallest values, ties by lower index."""
    ranked = sorted(range(len(values)), key=lambda i: (values[i], i))
    return sorted(ranked[:count])


def kl(q, p):
    return sum(qi * math.log(qi / pi) for qi, pi in zip(q, p) if qi > 0)


def oracle_filter_prune(weights, counts):
    """Brute force on a chain of conv weights: prune layers in order, recomputing norms each time."""
    ws = [w.copy() for w in weights]
    alive = [list(range(w.shape[0])) for w in ws]
    for i, count in enumerate(counts):
        w = ws[i]
        norms = [sum(abs(v) for v in w[f].ravel()) if f in alive[i] else math.inf for f in range(w.shape[0])]
        chosen = sorted_smallest(norms, count)
        for f in chosen:
            alive[i].remove(f)
            w[f] = 0.0
            if i + 1 < len(ws):
                ws[i + 1][:, f] = 0.0
    return alive


def oracle_global(weight_lists, fraction):
    entries = []
    for li, w in enumerate(weight_lists):
        for fi, (v, alive) in enumerate(w):
            if alive:
                entries.append((abs(v), li, fi))
    count = math.floor(Fraction(str(fraction)) * len(entries))
    return {(li, fi) for _, li, fi in sorted(entries)[:count]}
