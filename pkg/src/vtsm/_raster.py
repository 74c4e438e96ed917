"""Numba z-buffer rasterizer kernel.

Works on camera-frame vertices. Triangles crossing the near plane are
clipped (Sutherland-Hodgman against z = near) and fan-triangulated. For every
covered pixel centre the kernel stores the camera-frame depth, the index of
the winning triangle and perspective-correct barycentric weights with respect
to the original (unclipped) triangle, from which callers interpolate any
per-vertex attribute. Per-pixel arithmetic depends only on absolute pixel
coordinates, so rasterizing a sub-window gives bit-identical results to
cropping a full-frame raster.
"""
import numpy as np
from numba import njit

_EDGE_EPS = -1e-12


@njit(cache=True)
def _raster_sub(q, bq, f, cu, cv, near, far, r0, c0, h, w, tri, depth, bary, owner):
    su0 = f * q[0, 1] / q[0, 2] + cu
    sv0 = f * q[0, 0] / q[0, 2] + cv
    su1 = f * q[1, 1] / q[1, 2] + cu
    sv1 = f * q[1, 0] / q[1, 2] + cv
    su2 = f * q[2, 1] / q[2, 2] + cu
    sv2 = f * q[2, 0] / q[2, 2] + cv
    area = (su1 - su0) * (sv2 - sv0) - (sv1 - sv0) * (su2 - su0)
    if abs(area) < 1e-14:
        return
    rmin = max(r0, int(np.ceil(min(su0, min(su1, su2)))))
    rmax = min(r0 + h - 1, int(np.floor(max(su0, max(su1, su2)))))
    cmin = max(c0, int(np.ceil(min(sv0, min(sv1, sv2)))))
    cmax = min(c0 + w - 1, int(np.floor(max(sv0, max(sv1, sv2)))))
    if rmin > rmax or cmin > cmax:
        return
    iz0 = 1.0 / q[0, 2]
    iz1 = 1.0 / q[1, 2]
    iz2 = 1.0 / q[2, 2]
    inv_area = 1.0 / area
    for r in range(rmin, rmax + 1):
        pr = float(r)
        for c in range(cmin, cmax + 1):
            pc = float(c)
            l0 = ((su1 - pr) * (sv2 - pc) - (sv1 - pc) * (su2 - pr)) * inv_area
            if l0 < _EDGE_EPS:
                continue
            l1 = ((su2 - pr) * (sv0 - pc) - (sv2 - pc) * (su0 - pr)) * inv_area
            if l1 < _EDGE_EPS:
                continue
            l2 = ((su0 - pr) * (sv1 - pc) - (sv0 - pc) * (su1 - pr)) * inv_area
            if l2 < _EDGE_EPS:
                continue
            w0 = l0 * iz0
            w1 = l1 * iz1
            w2 = l2 * iz2
            s = w0 + w1 + w2
            if s <= 0.0:
                continue
            z = 1.0 / s
            if z < near or z > far:
                continue
            i = r - r0
            j = c - c0
            if z >= depth[i, j]:
                continue
            depth[i, j] = z
            owner[i, j] = tri
            for k in range(3):
                bary[i, j, k] = (w0 * bq[0, k] + w1 * bq[1, k] + w2 * bq[2, k]) * z


@njit(cache=True)
def rasterize(pc, faces, subset, f, cu, cv, near, far, r0, c0, h, w):
    depth = np.full((h, w), np.inf)
    bary = np.zeros((h, w, 3))
    owner = np.full((h, w), -1, dtype=np.int64)
    poly = np.empty((4, 3))
    pbary = np.empty((4, 3))
    q = np.empty((3, 3))
    bq = np.empty((3, 3))
    src = np.empty((3, 3))
    sb = np.eye(3)
    for t in subset:
        n_in = 0
        for k in range(3):
            for a in range(3):
                src[k, a] = pc[faces[t, k], a]
            if src[k, 2] >= near:
                n_in += 1
        if n_in == 0:
            continue
        if n_in == 3:
            _raster_sub(src, sb, f, cu, cv, near, far, r0, c0, h, w, t, depth, bary, owner)
            continue
        m = 0
        for k in range(3):
            kn = (k + 1) % 3
            za = src[k, 2]
            zb = src[kn, 2]
            ina = za >= near
            inb = zb >= near
            if ina:
                for a in range(3):
                    poly[m, a] = src[k, a]
                    pbary[m, a] = sb[k, a]
                m += 1
            if ina != inb:
                s = (near - za) / (zb - za)
                for a in range(3):
                    poly[m, a] = src[k, a] + s * (src[kn, a] - src[k, a])
                    pbary[m, a] = sb[k, a] + s * (sb[kn, a] - sb[k, a])
                poly[m, 2] = near
                m += 1
        for k in range(1, m - 1):
            for a in range(3):
                q[0, a] = poly[0, a]
                q[1, a] = poly[k, a]
                q[2, a] = poly[k + 1, a]
                bq[0, a] = pbary[0, a]
                bq[1, a] = pbary[k, a]
                bq[2, a] = pbary[k + 1, a]
            _raster_sub(q, bq, f, cu, cv, near, far, r0, c0, h, w, t, depth, bary, owner)
    return depth, bary, owner
