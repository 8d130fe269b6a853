# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: convolution lowering and 26-connected labeling.

Every function here has a pure-Python twin in ``odseg._fallback`` with the
same signature; ``odseg.backend`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col3d(real[:, :, :, ::1] xp, int k, int stride, int od, int oh, int ow):
    """Gather padded input ``(c, D, H, W)`` into columns ``(c*k^3, od*oh*ow)``."""
    cdef Py_ssize_t c = xp.shape[0]
    cdef Py_ssize_t kk = k * k * k
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((c * kk, od * oh * ow), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t ci, a, b, e, z, y, x, row, col, zs, ys
    for ci in range(c):
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    row = ((ci * k + a) * k + b) * k + e
                    col = 0
                    for z in range(od):
                        zs = z * stride + a
                        for y in range(oh):
                            ys = y * stride + b
                            for x in range(ow):
                                cols[row, col] = xp[ci, zs, ys, x * stride + e]
                                col += 1
    return cols_arr


def col2im3d(real[:, ::1] cols, int c, int dp, int hp, int wp, int k, int stride,
             int od, int oh, int ow):
    """Scatter-add columns back onto a zero padded image (adjoint of im2col3d)."""
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((c, dp, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, a, b, e, z, y, x, row, col, zs, ys
    for ci in range(c):
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    row = ((ci * k + a) * k + b) * k + e
                    col = 0
                    for z in range(od):
                        zs = z * stride + a
                        for y in range(oh):
                            ys = y * stride + b
                            for x in range(ow):
                                out[ci, zs, ys, x * stride + e] += cols[row, col]
                                col += 1
    return out_arr


def conv3d_naive(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w, real[::1] bias,
                 int stride, int pad):
    """Direct definition, one output voxel at a time, fixed summation order.

    Accumulates in double precision and rounds once per output voxel.
    """
    cdef Py_ssize_t cin = x.shape[0], d = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t od = (d + 2 * pad - k) // stride + 1
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((cout, od, oh, ow), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t o, z, y, xx, ci, a, b, e, iz, iy, ix
    cdef double acc
    for o in range(cout):
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    acc = bias[o]
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
                                    acc = acc + <double>x[ci, iz, iy, ix] * <double>w[o, ci, a, b, e]
                    out[o, z, y, xx] = <real>acc
    return out_arr


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t root = i, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


def label26(cnp.uint8_t[:, :, ::1] mask):
    """Two-pass union-find labeling; labels numbered by first voxel in scan order."""
    cdef Py_ssize_t d = mask.shape[0], h = mask.shape[1], w = mask.shape[2]
    labels_arr = np.zeros((d, h, w), dtype=np.int32)
    cdef int[:, :, ::1] labels = labels_arr
    parent_arr = np.zeros(d * h * w + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    cdef Py_ssize_t z, y, x, dz, dy, dx, nz, ny, nx, nxt_label = 1, cur, other, ra, rb
    with nogil:
        for z in range(d):
            for y in range(h):
                for x in range(w):
                    if mask[z, y, x] == 0:
                        continue
                    cur = 0
                    # the 13 neighbours already visited in scan order
                    for dz in range(-1, 1):
                        for dy in range(-1, 2):
                            for dx in range(-1, 2):
                                if dz == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                                    continue
                                nz = z + dz
                                ny = y + dy
                                nx = x + dx
                                if nz < 0 or ny < 0 or ny >= h or nx < 0 or nx >= w:
                                    continue
                                other = labels[nz, ny, nx]
                                if other == 0:
                                    continue
                                if cur == 0:
                                    cur = other
                                else:
                                    ra = _find(parent, cur)
                                    rb = _find(parent, other)
                                    if ra < rb:
                                        parent[rb] = ra
                                    elif rb < ra:
                                        parent[ra] = rb
                    if cur == 0:
                        cur = nxt_label
                        parent[cur] = cur
                        nxt_label += 1
                    labels[z, y, x] = <int>cur
    # provisional labels grow in scan order and roots are minimal, so the
    # compacted numbering follows first appearance
    remap_arr = np.zeros(nxt_label, dtype=np.int32)
    cdef int[::1] remap = remap_arr
    cdef int count = 0
    cdef Py_ssize_t i
    for i in range(1, nxt_label):
        ra = _find(parent, i)
        if ra == i:
            count += 1
            remap[i] = count
        else:
            remap[i] = remap[ra]
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if labels[z, y, x] != 0:
                    labels[z, y, x] = remap[labels[z, y, x]]
    return labels_arr, count
