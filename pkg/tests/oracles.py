"""Brute-force reference implementations used by several test modules."""

import numpy as np
from skimage.morphology import thin


def as_set(mask):
    return {tuple(p) for p in np.argwhere(np.asarray(mask, dtype=bool))}


def dice_oracle(p, g):
    P, G = as_set(p), as_set(g)
    if not P and not G:
        return 1.0
    return 2 * len(P & G) / (len(P) + len(G))


def precision_oracle(p, g):
    P, G = as_set(p), as_set(g)
    if not P:
        return 1.0 if not G else 0.0
    return len(P & G) / len(P)


def recall_oracle(p, g):
    P, G = as_set(p), as_set(g)
    if not G:
        return 1.0 if not P else 0.0
    return len(P & G) / len(G)


def cldice_oracle(p, g, sp, sg):
    P, G, SP, SG = as_set(p), as_set(g), as_set(sp), as_set(sg)
    if not P and not G:
        return 1.0
    tprec = len(SP & G) / len(SP) if SP else 0.0
    tsens = len(SG & P) / len(SG) if SG else 0.0
    if tprec + tsens == 0:
        return 0.0
    return 2 * tprec * tsens / (tprec + tsens)


def reference_thin(mask):
    return thin(np.asarray(mask, dtype=bool))


def random_tube_mask(rng, size=16, n_tubes=2):
    """Union of thick random line segments, a cheap tube-like mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_tubes):
        p0, p1 = rng.uniform(1, size - 2, 2), rng.uniform(1, size - 2, 2)
        r = rng.uniform(0.6, 1.8)
        d = p1 - p0
        t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(d @ d, 1e-9), 0, 1)
        dist2 = (yy - p0[0] - t * d[0]) ** 2 + (xx - p0[1] - t * d[1]) ** 2
        mask |= dist2 <= r * r
    return mask


def central_diff_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
