"""Ray/triangle queries over a mesh, accelerated by a uniform grid in the XY plane.

Terrain meshes are close to height fields, so bucketing triangles by their
XY footprint and walking the ray's XY projection cell by cell (2-D DDA) keeps
each query to a handful of triangle tests. Rays are first clipped to the
mesh bounding box, which bounds shadow rays that climb above the terrain.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_BARY_EPS = 1e-12


@njit(cache=True)
def _intersect(ox, oy, oz, dx, dy, dz, v0, e1, e2, k):
    """Moller-Trumbore; returns the ray parameter or inf."""
    px = dy * e2[k, 2] - dz * e2[k, 1]
    py = dz * e2[k, 0] - dx * e2[k, 2]
    pz = dx * e2[k, 1] - dy * e2[k, 0]
    det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
    if abs(det) < 1e-15:
        return np.inf
    inv = 1.0 / det
    tx = ox - v0[k, 0]
    ty = oy - v0[k, 1]
    tz = oz - v0[k, 2]
    a = (tx * px + ty * py + tz * pz) * inv
    if a < -_BARY_EPS or a > 1.0 + _BARY_EPS:
        return np.inf
    qx = ty * e1[k, 2] - tz * e1[k, 1]
    qy = tz * e1[k, 0] - tx * e1[k, 2]
    qz = tx * e1[k, 1] - ty * e1[k, 0]
    b = (dx * qx + dy * qy + dz * qz) * inv
    if b < -_BARY_EPS or a + b > 1.0 + _BARY_EPS:
        return np.inf
    return (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv


@njit(cache=True)
def _build_grid(vmin, vmax, x0, y0, cs, nx, ny):
    ntri = vmin.shape[0]
    counts = np.zeros(nx * ny + 1, dtype=np.int64)
    for k in range(ntri):
        i0 = max(0, min(nx - 1, int(np.floor((vmin[k, 0] - x0) / cs))))
        i1 = max(0, min(nx - 1, int(np.floor((vmax[k, 0] - x0) / cs))))
        j0 = max(0, min(ny - 1, int(np.floor((vmin[k, 1] - y0) / cs))))
        j1 = max(0, min(ny - 1, int(np.floor((vmax[k, 1] - y0) / cs))))
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                counts[j * nx + i + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    items = np.empty(start[-1], dtype=np.int64)
    for k in range(ntri):
        i0 = max(0, min(nx - 1, int(np.floor((vmin[k, 0] - x0) / cs))))
        i1 = max(0, min(nx - 1, int(np.floor((vmax[k, 0] - x0) / cs))))
        j0 = max(0, min(ny - 1, int(np.floor((vmin[k, 1] - y0) / cs))))
        j1 = max(0, min(ny - 1, int(np.floor((vmax[k, 1] - y0) / cs))))
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                c = j * nx + i
                items[fill[c]] = k
                fill[c] += 1
    return start, items


@njit(cache=True)
def _clip_box(o, d, tmin, tmax, lo, hi):
    t0 = tmin
    t1 = tmax
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0
        else:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    return t0, t1


@njit(cache=True)
def _traverse(o, d, tmin, tmax, v0, e1, e2, lo, hi, x0, y0, cs, nx, ny, start, items, any_hit):
    """Walk grid cells along the ray; returns (t, triangle) of the first/closest hit."""
    t0, t1 = _clip_box(o, d, tmin, tmax, lo, hi)
    best_t = np.inf
    best_k = -1
    if t0 > t1:
        return best_t, best_k
    px = o[0] + t0 * d[0]
    py = o[1] + t0 * d[1]
    i = max(0, min(nx - 1, int(np.floor((px - x0) / cs))))
    j = max(0, min(ny - 1, int(np.floor((py - y0) / cs))))
    if d[0] > 0:
        sx = 1
        tnx = (x0 + (i + 1) * cs - o[0]) / d[0]
        tdx = cs / d[0]
    elif d[0] < 0:
        sx = -1
        tnx = (x0 + i * cs - o[0]) / d[0]
        tdx = -cs / d[0]
    else:
        sx = 0
        tnx = np.inf
        tdx = np.inf
    if d[1] > 0:
        sy = 1
        tny = (y0 + (j + 1) * cs - o[1]) / d[1]
        tdy = cs / d[1]
    elif d[1] < 0:
        sy = -1
        tny = (y0 + j * cs - o[1]) / d[1]
        tdy = -cs / d[1]
    else:
        sy = 0
        tny = np.inf
        tdy = np.inf
    while True:
        c = j * nx + i
        for s in range(start[c], start[c + 1]):
            k = items[s]
            t = _intersect(o[0], o[1], o[2], d[0], d[1], d[2], v0, e1, e2, k)
            if t >= tmin and t <= tmax and t < best_t:
                best_t = t
                best_k = k
                if any_hit:
                    return best_t, best_k
        t_exit = min(tnx, tny)
        if best_k >= 0 and best_t <= t_exit:
            return best_t, best_k
        if t_exit > t1:
            return best_t, best_k
        if tnx < tny:
            i += sx
            tnx += tdx
            if i < 0 or i >= nx:
                return best_t, best_k
        else:
            j += sy
            tny += tdy
            if j < 0 or j >= ny:
                return best_t, best_k


@njit(cache=True)
def _batch(origins, dirs, tmin, tmax, v0, e1, e2, lo, hi, x0, y0, cs, nx, ny, start, items, any_hit):
    n = origins.shape[0]
    ts = np.empty(n)
    ks = np.empty(n, dtype=np.int64)
    for r in range(n):
        t, k = _traverse(origins[r], dirs[r], tmin[r], tmax[r], v0, e1, e2, lo, hi,
                         x0, y0, cs, nx, ny, start, items, any_hit)
        ts[r] = t
        ks[r] = k
    return ts, ks


@njit(cache=True)
def _brute_closest(origins, dirs, tmin, v0, e1, e2):
    n = origins.shape[0]
    ts = np.full(n, np.inf)
    ks = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        for k in range(v0.shape[0]):
            t = _intersect(origins[r, 0], origins[r, 1], origins[r, 2],
                           dirs[r, 0], dirs[r, 1], dirs[r, 2], v0, e1, e2, k)
            if t >= tmin and t < ts[r]:
                ts[r] = t
                ks[r] = k
    return ts, ks


def _as_rays(origins, dirs, tmin, tmax):
    o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    d = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    if o.shape[0] == 1 and d.shape[0] > 1:
        o = np.ascontiguousarray(np.broadcast_to(o, d.shape))
    n = o.shape[0]
    lo = np.ascontiguousarray(np.broadcast_to(np.asarray(tmin, dtype=np.float64), (n,)))
    hi = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=np.float64), (n,)))
    return o, d, lo, hi


class RayGrid:
    """Triangle soup bucketed on a uniform XY grid for ray queries."""

    def __init__(self, vertices, triangles, cell_size: float | None = None):
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        self.v0 = np.ascontiguousarray(a)
        self.e1 = np.ascontiguousarray(b - a)
        self.e2 = np.ascontiguousarray(c - a)
        self.n_triangles = len(f)
        if len(f) == 0:
            self.lo = np.zeros(3)
            self.hi = -np.ones(3)
            self.x0 = self.y0 = 0.0
            self.cs = 1.0
            self.nx = self.ny = 1
            self.start = np.zeros(2, dtype=np.int64)
            self.items = np.zeros(0, dtype=np.int64)
            return
        tmin = np.minimum(np.minimum(a, b), c)
        tmax = np.maximum(np.maximum(a, b), c)
        pad = 1e-9 * max(1.0, float(np.abs(v).max()))
        self.lo = tmin.min(axis=0) - pad
        self.hi = tmax.max(axis=0) + pad
        span = self.hi[:2] - self.lo[:2]
        if cell_size is None:
            # about two triangles' XY extent per cell
            ext = np.maximum(tmax[:, :2] - tmin[:, :2], 1e-9).mean()
            cell_size = max(2.0 * ext, float(span.max()) / 1024.0)
        self.cs = float(cell_size)
        self.x0, self.y0 = float(self.lo[0]), float(self.lo[1])
        self.nx = max(1, int(np.ceil(span[0] / self.cs)))
        self.ny = max(1, int(np.ceil(span[1] / self.cs)))
        self.start, self.items = _build_grid(np.ascontiguousarray(tmin), np.ascontiguousarray(tmax),
                                             self.x0, self.y0, self.cs, self.nx, self.ny)

    def _run(self, origins, dirs, tmin, tmax, any_hit):
        o, d, lo, hi = _as_rays(origins, dirs, tmin, tmax)
        if self.n_triangles == 0:
            return np.full(len(o), np.inf), np.full(len(o), -1, dtype=np.int64)
        return _batch(o, d, lo, hi, self.v0, self.e1, self.e2, self.lo, self.hi,
                      self.x0, self.y0, self.cs, self.nx, self.ny, self.start, self.items, any_hit)

    def occluded(self, origins, dirs, tmin=1e-9, tmax=np.inf) -> np.ndarray:
        """True where the ray hits any triangle with parameter in [tmin, tmax]."""
        _, k = self._run(origins, dirs, tmin, tmax, True)
        return k >= 0

    def closest(self, origins, dirs, tmin=0.0, tmax=np.inf):
        """Ray parameter and triangle index of the nearest hit (inf, -1 if none)."""
        return self._run(origins, dirs, tmin, tmax, False)


def brute_force_closest(vertices, triangles, origins, dirs, tmin=0.0):
    """Nearest hit by testing every triangle; reference for the grid and the rasterizer."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    a = np.ascontiguousarray(v[f[:, 0]])
    e1 = np.ascontiguousarray(v[f[:, 1]] - a)
    e2 = np.ascontiguousarray(v[f[:, 2]] - a)
    o, d, _, _ = _as_rays(origins, dirs, tmin, np.inf)
    return _brute_closest(o, d, float(tmin), a, e1, e2)
