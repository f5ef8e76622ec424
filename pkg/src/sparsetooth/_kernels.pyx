# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: z-buffer point splatting and brute-force k-NN."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, INFINITY

cnp.import_array()


def splat_zbuffer(const double[::1] u, const double[::1] v, const double[::1] depth,
                  const unsigned char[::1] valid, int height, int width, int radius):
    cdef Py_ssize_t n = u.shape[0]
    zbuf_np = np.full((height, width), np.inf, dtype=np.float64)
    index_np = np.full((height, width), -1, dtype=np.int64)
    cdef double[:, ::1] zbuf = zbuf_np
    cdef long long[:, ::1] index = index_np
    cdef Py_ssize_t i
    cdef int row, col, dy, dx, r2 = radius * radius, h, w
    cdef double d
    for i in range(n):
        if not valid[i]:
            continue
        d = depth[i]
        col = <int>floor(u[i] + 0.5)
        row = <int>floor(v[i] + 0.5)
        for dy in range(-radius, radius + 1):
            h = row + dy
            if h < 0 or h >= height:
                continue
            for dx in range(-radius, radius + 1):
                if dx * dx + dy * dy > r2:
                    continue
                w = col + dx
                if w < 0 or w >= width:
                    continue
                # strict: earlier (lower) index keeps the pixel on depth ties
                if d < zbuf[h, w]:
                    zbuf[h, w] = d
                    index[h, w] = i
    return zbuf_np, index_np


def knn_query(const double[:, ::1] ref, const double[:, ::1] query, int k):
    cdef Py_ssize_t m = ref.shape[0], q = query.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds reference size {m}")
    idx_np = np.empty((q, k), dtype=np.int64)
    dist_np = np.empty((q, k), dtype=np.float64)
    cdef long long[:, ::1] idx = idx_np
    cdef double[:, ::1] dist = dist_np
    cdef double[::1] best_d = np.empty(k, dtype=np.float64)
    cdef long long[::1] best_i = np.empty(k, dtype=np.int64)
    cdef Py_ssize_t a, j, count, pos, s
    cdef double dx, dy, dz, d, qx, qy, qz
    for a in range(q):
        qx = query[a, 0]
        qy = query[a, 1]
        qz = query[a, 2]
        count = 0
        for j in range(m):
            dx = qx - ref[j, 0]
            dy = qy - ref[j, 1]
            dz = qz - ref[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if count == k and d >= best_d[k - 1]:
                continue
            pos = count if count < k else k - 1
            while pos > 0 and best_d[pos - 1] > d:
                pos -= 1
            s = count if count < k else k - 1
            while s > pos:
                best_d[s] = best_d[s - 1]
                best_i[s] = best_i[s - 1]
                s -= 1
            best_d[pos] = d
            best_i[pos] = j
            if count < k:
                count += 1
        for j in range(k):
            idx[a, j] = best_i[j]
            dist[a, j] = sqrt(best_d[j])
    return idx_np, dist_np
