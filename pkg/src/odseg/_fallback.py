"""Pure-Python/numpy twins of the compiled kernels in ``_kernels.pyx``."""
from collections import deque

import numpy as np


def im2col3d(xp, k, stride, od, oh, ow):
    c = xp.shape[0]
    cols = np.empty((c, k, k, k, od, oh, ow), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                cols[:, a, b, e] = xp[:, a:a + stride * od:stride,
                                      b:b + stride * oh:stride,
                                      e:e + stride * ow:stride]
    return cols.reshape(c * k ** 3, od * oh * ow)


def col2im3d(cols, c, dp, hp, wp, k, stride, od, oh, ow):
    out = np.zeros((c, dp, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, k, od, oh, ow)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                out[:, a:a + stride * od:stride,
                    b:b + stride * oh:stride,
                    e:e + stride * ow:stride] += cols[:, a, b, e]
    return out


def conv3d_naive(x, w, bias, stride, pad):
    cin, d, h, wd = x.shape
    cout, k = w.shape[0], w.shape[2]
    od = (d + 2 * pad - k) // stride + 1
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.empty((cout, od, oh, ow), dtype=x.dtype)
    # Python floats accumulate in double; the store rounds once per voxel
    xl = x.tolist()
    wl = w.tolist()
    for o in range(cout):
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    acc = float(bias[o])
                    for ci in range(cin):
                        for a in range(k):
                            iz = z * stride + a - pad
                            if iz < 0 or iz >= d:
                                continue
                            for b in range(k):
                                iy = y * stride + b - pad
                                if iy < 0 or iy >= h:
                                    continue
                                for e in range(k):
                                    ix = xx * stride + e - pad
                                    if ix < 0 or ix >= wd:
                                        continue
                                    acc += xl[ci][iz][iy][ix] * wl[o][ci][a][b][e]
                    out[o, z, y, xx] = acc
    return out


_OFFSETS_26 = [(dz, dy, dx)
               for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dz, dy, dx) != (0, 0, 0)]


def label26(mask):
    """Breadth-first flood fill started from voxels in scan order."""
    d, h, w = mask.shape
    labels = np.zeros((d, h, w), dtype=np.int32)
    count = 0
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        count += 1
        labels[start] = count
        queue = deque([start])
        while queue:
            z, y, x = queue.popleft()
            for dz, dy, dx in _OFFSETS_26:
                nz, ny, nx = z + dz, y + dy, x + dx
                if 0 <= nz < d and 0 <= ny < h and 0 <= nx < w \
                        and mask[nz, ny, nx] and not labels[nz, ny, nx]:
                    labels[nz, ny, nx] = count
                    queue.append((nz, ny, nx))
    return labels, count
