"""Independent reference implementations used only by the tests.

None of these import the code they check.
"""
import itertools
import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv_voxel(x, w, bias, o, z, y, xx, stride, pad):
    """Explicit sum for one output voxel of a 3-d convolution."""
    cin, d, h, wd = x.shape
    k = w.shape[2]
    terms = []
    for ci, a, b, e in itertools.product(range(cin), range(k), range(k), range(k)):
        iz, iy, ix = z * stride + a - pad, y * stride + b - pad, xx * stride + e - pad
        v = x[ci, iz, iy, ix] if 0 <= iz < d and 0 <= iy < h and 0 <= ix < wd else 0.0
        terms.append(v * w[o, ci, a, b, e])
    return bias[o] + math.fsum(terms), len(terms)


def union_find_components(mask):
    """Component count by uniting every pair of 26-adjacent foreground voxels."""
    coords = [tuple(c) for c in np.argwhere(mask)]
    index = {c: i for i, c in enumerate(coords)}
    parent = list(range(len(coords)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for c in coords:
        for off in itertools.product((-1, 0, 1), repeat=3):
            nb = (c[0] + off[0], c[1] + off[1], c[2] + off[2])
            if nb in index:
                ra, rb = find(index[c]), find(index[nb])
                if ra != rb:
                    parent[ra] = rb
    roots = {find(i) for i in range(len(coords))}
    return len(roots), {c: find(index[c]) for c in coords}


def dice_sets(a, b):
    sa = {tuple(c) for c in np.argwhere(a)}
    sb = {tuple(c) for c in np.argwhere(b)}
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def boundary_set(mask):
    d, h, w = mask.shape
    out = []
    for z, y, x in np.argwhere(mask):
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < d and 0 <= ny < h and 0 <= nx < w) or not mask[nz, ny, nx]:
                out.append((z, y, x))
                break
    return np.array(out, dtype=float).reshape(-1, 3)


def hd95_all_pairs(a, b, spacing=(1.0, 1.0, 1.0)):
    if not a.any() and not b.any():
        return 0.0
    if a.any() != b.any():
        return math.sqrt(sum((n * s) ** 2 for n, s in zip(a.shape, spacing)))
    pa = boundary_set(a) * np.asarray(spacing)
    pb = boundary_set(b) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(np.percentile(d.min(axis=1), 95), np.percentile(d.min(axis=0), 95))


def erode_sets(mask, radius=1):
    """Keep a voxel iff every voxel of its cube neighbourhood is inside the mask."""
    d, h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    r = range(-radius, radius + 1)
    for z, y, x in itertools.product(range(d), range(h), range(w)):
        ok = True
        for dz, dy, dx in itertools.product(r, r, r):
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < d and 0 <= ny < h and 0 <= nx < w) or not mask[nz, ny, nx]:
                ok = False
                break
        out[z, y, x] = ok
    return out


def count_parameters(in_ch, base, stages, use_odconv, use_multiscale, n_experts=4, reduction=4,
                     bidirectional=False, n_classes=4, max_features=320):
    """Closed-form parameter count of the dual-encoder U-Net."""
    feats = [min(base * 2 ** i, max_features) for i in range(stages + 1)]

    def conv(cin, cout, k=3):
        return cout * cin * k ** 3 + cout

    def odconv(cin, cout, k=3):
        cred = max(1, cin // reduction)
        heads = (k ** 3 + cin + cout + n_experts) * (cred + 1)
        return n_experts * cout * cin * k ** 3 + cout + cred * cin + cred + heads

    def block(cin, cout, od):
        return (odconv if od else conv)(cin, cout) + 2 * cout

    def encoder():
        total, cin = 0, in_ch
        for f in feats:
            total += block(cin, f, use_odconv) + block(f, f, use_odconv)
            cin = f
        return total

    total = encoder()
    if use_multiscale:
        total += encoder()
        fb = feats[-1]
        total += 4 * fb * fb * (2 if bidirectional else 1)
    for level in reversed(range(stages)):
        f, f_low = feats[level], feats[level + 1]
        total += f_low * f * 8 + f
        total += block(2 * f, f, False) + block(f, f, False)
    total += n_classes * feats[0] + n_classes
    return total
