"""Finite-difference oracles and small brute-force references used by tests."""
from __future__ import annotations

import itertools

import numpy as np

FD_STEP = 1e-6


def central_diff(f, x, idx=None, h=FD_STEP):
    """Central differences of scalar ``f`` w.r.t. entries ``idx`` of ``x``
    (all entries when None). ``x`` is perturbed in place and restored."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.asarray(out)


def rel_err(analytic, numeric):
    """Norm-wise relative error; exact agreement on zero vectors gives 0."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def naive_conv3d(x, w, d=1):
    """Loop-over-taps reference for a single sample ``[C, X, Y, Z]``."""
    cout, cin, k = w.shape[:3]
    out_sp = [s - (k - 1) * d for s in x.shape[1:]]
    out = np.zeros([cout] + out_sp)
    for i, j, l in itertools.product(range(k), repeat=3):
        xs = x[:, i * d:i * d + out_sp[0], j * d:j * d + out_sp[1], l * d:l * d + out_sp[2]]
        out += np.einsum("oc,cxyz->oxyz", w[:, :, i, j, l], xs)
    return out


def brute_surface(mask):
    """Border voxels by explicit 6-neighbour enumeration."""
    pts = set()
    dims = mask.shape
    for p in zip(*np.nonzero(mask)):
        for ax in range(3):
            for s in (-1, 1):
                q = list(p)
                q[ax] += s
                if not 0 <= q[ax] < dims[ax] or not mask[tuple(q)]:
                    pts.add(p)
    return np.array(sorted(pts), dtype=float).reshape(-1, 3)


def brute_assd(a, m, spacing=(1.0, 1.0, 1.0)):
    sa = brute_surface(a) * spacing
    sm = brute_surface(m) * spacing
    if len(sa) == 0 or len(sm) == 0:
        return float("nan")
    # all pairs, in row blocks to bound memory
    to_m = np.full(len(sa), np.inf)
    to_a = np.full(len(sm), np.inf)
    for i in range(0, len(sa), 512):
        d = np.sqrt(((sa[i:i + 512, None, :] - sm[None, :, :]) ** 2).sum(-1))
        to_m[i:i + 512] = d.min(axis=1)
        to_a = np.minimum(to_a, d.min(axis=0))
    return float((to_m.sum() + to_a.sum()) / (len(sa) + len(sm)))


def brute_dice(a, m):
    inter = sum(1 for v in zip(a.ravel(), m.ravel()) if v[0] and v[1])
    tot = int(a.sum()) + int(m.sum())
    return float("nan") if tot == 0 else 2 * inter / tot


def settle_bn(net, rng):
    """Give every batch-norm layer plausible, already-updated running statistics."""
    for s in net.bn.values():
        s.mean = rng.normal(0, 0.1, s.mean.shape).astype(s.mean.dtype)
        s.var = rng.uniform(0.5, 2.0, s.var.shape).astype(s.var.dtype)
        s.count = 1
    return net
