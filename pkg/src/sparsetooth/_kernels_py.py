"""Pure NumPy versions of the compiled kernels; same outputs bit for bit."""
import numpy as np


def splat_zbuffer(u, v, depth, valid, height, width, radius):
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    index = np.full((height, width), -1, dtype=np.int64)
    pts = np.flatnonzero(np.asarray(valid, dtype=bool))
    if pts.size == 0:
        return zbuf, index
    col = np.floor(u[pts] + 0.5).astype(np.int64)
    row = np.floor(v[pts] + 0.5).astype(np.int64)
    d = depth[pts]

    offsets = [(dy, dx) for dy in range(-radius, radius + 1)
               for dx in range(-radius, radius + 1) if dx * dx + dy * dy <= radius * radius]
    rows, cols, ds, ids = [], [], [], []
    for dy, dx in offsets:
        h = row + dy
        w = col + dx
        ok = (h >= 0) & (h < height) & (w >= 0) & (w < width)
        rows.append(h[ok])
        cols.append(w[ok])
        ds.append(d[ok])
        ids.append(pts[ok])
    rows = np.concatenate(rows)
    if rows.size == 0:
        return zbuf, index
    cols = np.concatenate(cols)
    ds = np.concatenate(ds)
    ids = np.concatenate(ids)
    flat = rows * width + cols
    # min depth per pixel, ties to the lower point index
    order = np.lexsort((ids, ds, flat))
    flat, ds, ids = flat[order], ds[order], ids[order]
    first = np.ones(flat.size, dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    zbuf.ravel()[flat[first]] = ds[first]
    index.ravel()[flat[first]] = ids[first]
    return zbuf, index


def knn_query(ref, query, k, chunk=256):
    m = ref.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds reference size {m}")
    q = query.shape[0]
    idx = np.empty((q, k), dtype=np.int64)
    dist = np.empty((q, k), dtype=np.float64)
    for start in range(0, q, chunk):
        qs = query[start:start + chunk]
        dx = qs[:, 0, None] - ref[None, :, 0]
        dy = qs[:, 1, None] - ref[None, :, 1]
        dz = qs[:, 2, None] - ref[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[start:start + chunk] = order
        dist[start:start + chunk] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return idx, dist
