"""Numba kernels for spatial queries and depth rasterization.

All kernels operate on flat float64/int64 arrays so they stay cacheable;
the friendly wrappers live in spatial.py and render.py.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_STACK = 128


@njit(cache=True)
def _closest_on_triangle(a, b, c, q):
    """Closest point to q on triangle abc (Ericson's algorithm)."""
    ab0 = b[0] - a[0]; ab1 = b[1] - a[1]; ab2 = b[2] - a[2]
    ac0 = c[0] - a[0]; ac1 = c[1] - a[1]; ac2 = c[2] - a[2]
    ap0 = q[0] - a[0]; ap1 = q[1] - a[1]; ap2 = q[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2]
    bp0 = q[0] - b[0]; bp1 = q[1] - b[1]; bp2 = q[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a[0] + v * ab0, a[1] + v * ab1, a[2] + v * ab2
    cp0 = q[0] - c[0]; cp1 = q[1] - c[1]; cp2 = q[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * ac0, a[1] + w * ac1, a[2] + w * ac2
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2])
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (
        a[0] + ab0 * v + ac0 * w,
        a[1] + ab1 * v + ac1 * w,
        a[2] + ab2 * v + ac2 * w,
    )


@njit(cache=True)
def _box_dist2(bmin, bmax, q):
    d2 = 0.0
    for k in range(3):
        if q[k] < bmin[k]:
            d = bmin[k] - q[k]
            d2 += d * d
        elif q[k] > bmax[k]:
            d = q[k] - bmax[k]
            d2 += d * d
    return d2


@njit(cache=True)
def bvh_closest_point(
    q,
    verts,
    tris,
    node_min,
    node_max,
    node_left,
    node_right,
    node_start,
    node_count,
    tri_order,
):
    """Euclidean closest surface point. Returns (x, y, z, face, dist2)."""
    best = 1e300
    bx = by = bz = 0.0
    bface = -1
    stack = np.empty(_STACK, dtype=np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_dist2(node_min[node], node_max[node], q) >= best:
            continue
        left = node_left[node]
        if left < 0:
            start = node_start[node]
            for i in range(start, start + node_count[node]):
                t = tri_order[i]
                px, py, pz = _closest_on_triangle(
                    verts[tris[t, 0]], verts[tris[t, 1]], verts[tris[t, 2]], q
                )
                d2 = (px - q[0]) ** 2 + (py - q[1]) ** 2 + (pz - q[2]) ** 2
                if d2 < best or (d2 == best and (bface < 0 or t < bface)):
                    best = d2
                    bx, by, bz = px, py, pz
                    bface = t
        else:
            right = node_right[node]
            dl = _box_dist2(node_min[left], node_max[left], q)
            dr = _box_dist2(node_min[right], node_max[right], q)
            # push the farther child first so the nearer is explored next
            if dl <= dr:
                stack[top] = right; top += 1
                stack[top] = left; top += 1
            else:
                stack[top] = left; top += 1
                stack[top] = right; top += 1
    return bx, by, bz, bface, best


@njit(cache=True)
def _mahal_on_triangle(a, b, c, q, w):
    """Minimize 0.5 (p-q)^T W (p-q) over triangle abc.

    Checks the in-plane stationary point and the three clamped edges;
    returns (error, px, py, pz).
    """
    e10 = b[0] - a[0]; e11 = b[1] - a[1]; e12 = b[2] - a[2]
    e20 = c[0] - a[0]; e21 = c[1] - a[1]; e22 = c[2] - a[2]
    d0 = q[0] - a[0]; d1 = q[1] - a[1]; d2 = q[2] - a[2]

    # We1 = W @ e1, We2 = W @ e2, Wd = W @ d
    we10 = w[0, 0] * e10 + w[0, 1] * e11 + w[0, 2] * e12
    we11 = w[1, 0] * e10 + w[1, 1] * e11 + w[1, 2] * e12
    we12 = w[2, 0] * e10 + w[2, 1] * e11 + w[2, 2] * e12
    we20 = w[0, 0] * e20 + w[0, 1] * e21 + w[0, 2] * e22
    we21 = w[1, 0] * e20 + w[1, 1] * e21 + w[1, 2] * e22
    we22 = w[2, 0] * e20 + w[2, 1] * e21 + w[2, 2] * e22
    wd0 = w[0, 0] * d0 + w[0, 1] * d1 + w[0, 2] * d2
    wd1 = w[1, 0] * d0 + w[1, 1] * d1 + w[1, 2] * d2
    wd2 = w[2, 0] * d0 + w[2, 1] * d1 + w[2, 2] * d2

    a11 = e10 * we10 + e11 * we11 + e12 * we12
    a12 = e10 * we20 + e11 * we21 + e12 * we22
    a22 = e20 * we20 + e21 * we21 + e22 * we22
    b1 = e10 * wd0 + e11 * wd1 + e12 * wd2
    b2 = e20 * wd0 + e21 * wd1 + e22 * wd2

    best = 1e300
    bx = by = bz = 0.0

    det = a11 * a22 - a12 * a12
    if abs(det) > 1e-300:
        u = (b1 * a22 - b2 * a12) / det
        v = (a11 * b2 - a12 * b1) / det
        if u >= 0.0 and v >= 0.0 and u + v <= 1.0:
            px = a[0] + u * e10 + v * e20
            py = a[1] + u * e11 + v * e21
            pz = a[2] + u * e12 + v * e22
            rx = px - q[0]; ry = py - q[1]; rz = pz - q[2]
            err = 0.5 * (
                rx * (w[0, 0] * rx + w[0, 1] * ry + w[0, 2] * rz)
                + ry * (w[1, 0] * rx + w[1, 1] * ry + w[1, 2] * rz)
                + rz * (w[2, 0] * rx + w[2, 1] * ry + w[2, 2] * rz)
            )
            if err < best:
                best = err
                bx, by, bz = px, py, pz

    for edge in range(3):
        if edge == 0:
            o0, o1, o2 = a[0], a[1], a[2]
            g0, g1, g2 = e10, e11, e12
        elif edge == 1:
            o0, o1, o2 = a[0], a[1], a[2]
            g0, g1, g2 = e20, e21, e22
        else:
            o0, o1, o2 = b[0], b[1], b[2]
            g0, g1, g2 = c[0] - b[0], c[1] - b[1], c[2] - b[2]
        h0 = q[0] - o0; h1 = q[1] - o1; h2 = q[2] - o2
        wg0 = w[0, 0] * g0 + w[0, 1] * g1 + w[0, 2] * g2
        wg1 = w[1, 0] * g0 + w[1, 1] * g1 + w[1, 2] * g2
        wg2 = w[2, 0] * g0 + w[2, 1] * g1 + w[2, 2] * g2
        denom = g0 * wg0 + g1 * wg1 + g2 * wg2
        if denom <= 1e-300:
            t = 0.0
        else:
            t = (h0 * wg0 + h1 * wg1 + h2 * wg2) / denom
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
        px = o0 + t * g0; py = o1 + t * g1; pz = o2 + t * g2
        rx = px - q[0]; ry = py - q[1]; rz = pz - q[2]
        err = 0.5 * (
            rx * (w[0, 0] * rx + w[0, 1] * ry + w[0, 2] * rz)
            + ry * (w[1, 0] * rx + w[1, 1] * ry + w[1, 2] * rz)
            + rz * (w[2, 0] * rx + w[2, 1] * ry + w[2, 2] * rz)
        )
        if err < best:
            best = err
            bx, by, bz = px, py, pz
    return best, bx, by, bz


@njit(cache=True)
def bvh_most_likely_point(
    q,
    w,
    lambda_min,
    verts,
    tris,
    node_min,
    node_max,
    node_left,
    node_right,
    node_start,
    node_count,
    tri_order,
):
    """Surface point minimizing 0.5 (p-q)^T W (p-q).

    Pruning converts the anisotropic bound into a Euclidean one through
    the smallest eigenvalue of W: 0.5 * lambda_min * d^2 <= error.
    Returns (x, y, z, face, error).
    """
    best = 1e300
    bx = by = bz = 0.0
    bface = -1
    stack = np.empty(_STACK, dtype=np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if 0.5 * lambda_min * _box_dist2(node_min[node], node_max[node], q) >= best:
            continue
        left = node_left[node]
        if left < 0:
            start = node_start[node]
            for i in range(start, start + node_count[node]):
                t = tri_order[i]
                err, px, py, pz = _mahal_on_triangle(
                    verts[tris[t, 0]], verts[tris[t, 1]], verts[tris[t, 2]], q, w
                )
                if err < best or (err == best and (bface < 0 or t < bface)):
                    best = err
                    bx, by, bz = px, py, pz
                    bface = t
        else:
            right = node_right[node]
            dl = _box_dist2(node_min[left], node_max[left], q)
            dr = _box_dist2(node_min[right], node_max[right], q)
            if dl <= dr:
                stack[top] = right; top += 1
                stack[top] = left; top += 1
            else:
                stack[top] = left; top += 1
                stack[top] = right; top += 1
    return bx, by, bz, bface, best


@njit(cache=True)
def bvh_closest_batch(
    queries, verts, tris, node_min, node_max, node_left, node_right,
    node_start, node_count, tri_order, out_points, out_faces, out_dist,
):
    for i in range(queries.shape[0]):
        x, y, z, f, d2 = bvh_closest_point(
            queries[i], verts, tris, node_min, node_max, node_left,
            node_right, node_start, node_count, tri_order,
        )
        out_points[i, 0] = x
        out_points[i, 1] = y
        out_points[i, 2] = z
        out_faces[i] = f
        out_dist[i] = np.sqrt(d2)


@njit(cache=True)
def bvh_most_likely_batch(
    queries, ws, lambda_mins, verts, tris, node_min, node_max, node_left,
    node_right, node_start, node_count, tri_order, out_points, out_faces, out_err,
):
    for i in range(queries.shape[0]):
        x, y, z, f, e = bvh_most_likely_point(
            queries[i], ws[i], lambda_mins[i], verts, tris, node_min, node_max,
            node_left, node_right, node_start, node_count, tri_order,
        )
        out_points[i, 0] = x
        out_points[i, 1] = y
        out_points[i, 2] = z
        out_faces[i] = f
        out_err[i] = e


@njit(cache=True)
def rasterize_depth(
    verts_cam, tris, fx, fy, cx, cy, width, height, znear, depth
):
    """Z-buffer rasterization of camera-space triangles.

    Pixel centers sit at integer coordinates; depth is interpolated
    perspective-correctly via 1/z. Triangles are clipped against the
    z = znear plane before projection.
    """
    poly = np.empty((4, 3))
    clipped = np.empty((4, 3))
    px = np.empty(4)
    py = np.empty(4)
    for t in range(tris.shape[0]):
        # gather and clip against the near plane
        n_in = 0
        for k in range(3):
            poly[k, 0] = verts_cam[tris[t, k], 0]
            poly[k, 1] = verts_cam[tris[t, k], 1]
            poly[k, 2] = verts_cam[tris[t, k], 2]
            if poly[k, 2] >= znear:
                n_in += 1
        if n_in == 0:
            continue
        if n_in == 3:
            n_clip = 3
            for k in range(3):
                clipped[k, 0] = poly[k, 0]
                clipped[k, 1] = poly[k, 1]
                clipped[k, 2] = poly[k, 2]
        else:
            n_clip = 0
            for k in range(3):
                a = poly[k]
                b = poly[(k + 1) % 3]
                a_in = a[2] >= znear
                b_in = b[2] >= znear
                if a_in:
                    clipped[n_clip, 0] = a[0]
                    clipped[n_clip, 1] = a[1]
                    clipped[n_clip, 2] = a[2]
                    n_clip += 1
                if a_in != b_in:
                    s = (znear - a[2]) / (b[2] - a[2])
                    clipped[n_clip, 0] = a[0] + s * (b[0] - a[0])
                    clipped[n_clip, 1] = a[1] + s * (b[1] - a[1])
                    clipped[n_clip, 2] = znear
                    n_clip += 1
        if n_clip < 3:
            continue
        for k in range(n_clip):
            px[k] = fx * clipped[k, 0] / clipped[k, 2] + cx
            py[k] = fy * clipped[k, 1] / clipped[k, 2] + cy
        # fan-triangulate the clipped polygon
        for sub in range(n_clip - 2):
            i0, i1, i2 = 0, sub + 1, sub + 2
            x0, y0, z0 = px[i0], py[i0], clipped[i0, 2]
            x1, y1, z1 = px[i1], py[i1], clipped[i1, 2]
            x2, y2, z2 = px[i2], py[i2], clipped[i2, 2]
            area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if abs(area) < 1e-12:
                continue
            min_x = min(x0, min(x1, x2))
            max_x = max(x0, max(x1, x2))
            min_y = min(y0, min(y1, y2))
            max_y = max(y0, max(y1, y2))
            ix0 = max(0, int(np.ceil(min_x - 1e-9)))
            ix1 = min(width - 1, int(np.floor(max_x + 1e-9)))
            iy0 = max(0, int(np.ceil(min_y - 1e-9)))
            iy1 = min(height - 1, int(np.floor(max_y + 1e-9)))
            if ix0 > ix1 or iy0 > iy1:
                continue
            inv_area = 1.0 / area
            iz0 = 1.0 / z0
            iz1 = 1.0 / z1
            iz2 = 1.0 / z2
            for iy in range(iy0, iy1 + 1):
                for ix in range(ix0, ix1 + 1):
                    l0 = ((x1 - ix) * (y2 - iy) - (x2 - ix) * (y1 - iy)) * inv_area
                    l1 = ((x2 - ix) * (y0 - iy) - (x0 - ix) * (y2 - iy)) * inv_area
                    l2 = 1.0 - l0 - l1
                    if l0 < -1e-9 or l1 < -1e-9 or l2 < -1e-9:
                        continue
                    z = 1.0 / (l0 * iz0 + l1 * iz1 + l2 * iz2)
                    if z < depth[iy, ix]:
                        depth[iy, ix] = z
