"""Numba implementations of the hot kernels.

Everything here is plain array-in / array-out so results can be compared
one-to-one with ``numpy_backend``. Parallel loops only ever write to
per-item slots; scalar reductions happen later in numpy, which keeps
outputs bit-identical across thread counts.
"""

import math

import numpy as np
from numba import njit, prange

F8 = np.float64
MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)

# ---------------------------------------------------------------------------
# counter-based RNG (splitmix64 finalizer over a combined counter)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & MASK64
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & MASK64
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _rand_u01(seed, pixel, sample, dim):
    h = _mix64(seed)
    h = _mix64(h ^ np.uint64(pixel))
    h = _mix64(h ^ np.uint64(sample))
    h = _mix64(h ^ np.uint64(dim))
    return (h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# scalar optics
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _fresnel(ci, ct, eta):
    rp = (ci - eta * ct) / (ci + eta * ct)
    rs = (eta * ci - ct) / (eta * ci + ct)
    f = 0.5 * (rp * rp + rs * rs)
    if f < 0.0:
        f = 0.0
    if f > 1.0:
        f = 1.0
    return f


@njit(cache=True, inline="always")
def _fresnel_grad(ci, ct, eta):
    # returns (dF/dci, dF/dct) of the unpolarized two-term form
    dp = ci + eta * ct
    ds = eta * ci + ct
    rp = (ci - eta * ct) / dp
    rs = (eta * ci - ct) / ds
    dci = rp * 2.0 * eta * ct / (dp * dp) + rs * 2.0 * eta * ct / (ds * ds)
    dct = -rp * 2.0 * eta * ci / (dp * dp) - rs * 2.0 * eta * ci / (ds * ds)
    return dci, dct


@njit(cache=True, inline="always")
def _env_sample(data, dx, dy, dz):
    h = data.shape[0]
    w = data.shape[1]
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    if n > 0.0:
        dx /= n
        dy /= n
        dz /= n
    u = math.atan2(dx, -dz) / (2.0 * math.pi) + 0.5
    cy = dy
    if cy > 1.0:
        cy = 1.0
    elif cy < -1.0:
        cy = -1.0
    v = math.acos(cy) / math.pi
    x = u * w - 0.5
    y = v * h - 0.5
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    fx = x - x0
    fy = y - y0
    x1 = (x0 + 1) % w
    x0 = x0 % w
    if x0 < 0:
        x0 += w
    if x1 < 0:
        x1 += w
    y1 = y0 + 1
    if y1 > h - 1:
        y1 = h - 1
    r = (
        data[y0, x0, 0] * (1 - fx) * (1 - fy)
        + data[y0, x1, 0] * fx * (1 - fy)
        + data[y1, x0, 0] * (1 - fx) * fy
        + data[y1, x1, 0] * fx * fy
    )
    g = (
        data[y0, x0, 1] * (1 - fx) * (1 - fy)
        + data[y0, x1, 1] * fx * (1 - fy)
        + data[y1, x0, 1] * (1 - fx) * fy
        + data[y1, x1, 1] * fx * fy
    )
    b = (
        data[y0, x0, 2] * (1 - fx) * (1 - fy)
        + data[y0, x1, 2] * fx * (1 - fy)
        + data[y1, x0, 2] * (1 - fx) * fy
        + data[y1, x1, 2] * fx * fy
    )
    return r, g, b


@njit(cache=True)
def _env_sample_wgrad(data, dx, dy, dz, w0, w1, w2):
    """Radiance at a direction plus the gradient of sum_c w_c * E_c.

    The gradient is taken through the normalize step (so it is tangent to
    the direction) and uses the bilinear sub-gradient of the texture.
    """
    h = data.shape[0]
    w = data.shape[1]
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    if n > 0.0:
        dx /= n
        dy /= n
        dz /= n
    u = math.atan2(dx, -dz) / (2.0 * math.pi) + 0.5
    cy = dy
    if cy > 1.0:
        cy = 1.0
    elif cy < -1.0:
        cy = -1.0
    v = math.acos(cy) / math.pi
    x = u * w - 0.5
    y = v * h - 0.5
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    fx = x - x0
    fy = y - y0
    x1 = (x0 + 1) % w
    x0 = x0 % w
    if x0 < 0:
        x0 += w
    if x1 < 0:
        x1 += w
    y1 = y0 + 1
    if y1 > h - 1:
        y1 = h - 1

    val = np.zeros(3)
    dEdu = 0.0
    dEdv = 0.0
    for c in range(3):
        t00 = data[y0, x0, c]
        t10 = data[y0, x1, c]
        t01 = data[y1, x0, c]
        t11 = data[y1, x1, c]
        val[c] = (
            t00 * (1 - fx) * (1 - fy) + t10 * fx * (1 - fy) + t01 * (1 - fx) * fy + t11 * fx * fy
        )
        wc = w0 if c == 0 else (w1 if c == 1 else w2)
        dEdu += wc * w * ((1 - fy) * (t10 - t00) + fy * (t11 - t01))
        dEdv += wc * h * ((1 - fx) * (t01 - t00) + fx * (t11 - t10))

    denom = dx * dx + dz * dz
    inv2pi = 1.0 / (2.0 * math.pi)
    if denom > 1e-12:
        gux = inv2pi * (-dz) / denom
        guz = inv2pi * dx / denom
    else:
        gux = 0.0
        guz = 0.0
    s2 = 1.0 - dy * dy
    gvy = -1.0 / (math.pi * math.sqrt(s2)) if s2 > 1e-12 else 0.0

    gx = dEdu * gux
    gy = dEdv * gvy
    gz = dEdu * guz
    # project onto the tangent plane of the unit direction
    dot = gx * dx + gy * dy + gz * dz
    return val, gx - dot * dx, gy - dot * dy, gz - dot * dz


# ---------------------------------------------------------------------------
# BVH build (single-threaded; the tree layout matches the numpy builder:
# depth-first nodes, left child at node+1, leaves hold contiguous triangles)
# ---------------------------------------------------------------------------


@njit(cache=True)
def build_tree(lo_tri, hi_tri, centroids, leaf_size):
    n = lo_tri.shape[0]
    max_nodes = 2 * n
    nodes_min = np.empty((max_nodes, 3))
    nodes_max = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    count = np.zeros(max_nodes, dtype=np.int32)
    order = np.arange(n)
    # DFS stack of (lo, hi, parent, is_right); parent links fixed up on pop
    stack_lo = np.empty(max_nodes, dtype=np.int64)
    stack_hi = np.empty(max_nodes, dtype=np.int64)
    stack_parent = np.empty(max_nodes, dtype=np.int64)
    stack_isr = np.empty(max_nodes, dtype=np.uint8)
    sp = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    stack_parent[0] = -1
    stack_isr[0] = 0
    sp = 1
    n_nodes = 0
    while sp > 0:
        sp -= 1
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        parent = stack_parent[sp]
        isr = stack_isr[sp]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if isr == 1:
                right[parent] = node
            else:
                left[parent] = node
        bx0 = 1e300
        by0 = 1e300
        bz0 = 1e300
        bx1 = -1e300
        by1 = -1e300
        bz1 = -1e300
        cx0 = 1e300
        cy0 = 1e300
        cz0 = 1e300
        cx1 = -1e300
        cy1 = -1e300
        cz1 = -1e300
        for i in range(lo, hi):
            t = order[i]
            bx0 = min(bx0, lo_tri[t, 0])
            by0 = min(by0, lo_tri[t, 1])
            bz0 = min(bz0, lo_tri[t, 2])
            bx1 = max(bx1, hi_tri[t, 0])
            by1 = max(by1, hi_tri[t, 1])
            bz1 = max(bz1, hi_tri[t, 2])
            cx0 = min(cx0, centroids[t, 0])
            cy0 = min(cy0, centroids[t, 1])
            cz0 = min(cz0, centroids[t, 2])
            cx1 = max(cx1, centroids[t, 0])
            cy1 = max(cy1, centroids[t, 1])
            cz1 = max(cz1, centroids[t, 2])
        nodes_min[node, 0] = bx0
        nodes_min[node, 1] = by0
        nodes_min[node, 2] = bz0
        nodes_max[node, 0] = bx1
        nodes_max[node, 1] = by1
        nodes_max[node, 2] = bz1
        ex = cx1 - cx0
        ey = cy1 - cy0
        ez = cz1 - cz0
        if hi - lo <= leaf_size or max(ex, max(ey, ez)) <= 0.0:
            left[node] = lo
            count[node] = hi - lo
            continue
        axis = 0
        if ey > ex and ey >= ez:
            axis = 1
        elif ez > ex and ez > ey:
            axis = 2
        seg = order[lo:hi].copy()
        keys = np.empty(hi - lo)
        for i in range(hi - lo):
            keys[i] = centroids[seg[i], axis]
        perm = np.argsort(keys)
        for i in range(hi - lo):
            order[lo + i] = seg[perm[i]]
        mid = (lo + hi) // 2
        # right pushed first so the left subtree is laid out immediately after
        stack_lo[sp] = mid
        stack_hi[sp] = hi
        stack_parent[sp] = node
        stack_isr[sp] = 1
        sp += 1
        stack_lo[sp] = lo
        stack_hi[sp] = mid
        stack_parent[sp] = node
        stack_isr[sp] = 0
        sp += 1
    skip = np.full(n_nodes, -1, dtype=np.int32)
    sstack = np.empty(n_nodes + 1, dtype=np.int64)
    sskip = np.empty(n_nodes + 1, dtype=np.int64)
    sp = 0
    sstack[0] = 0
    sskip[0] = -1
    sp = 1
    while sp > 0:
        sp -= 1
        node = sstack[sp]
        nxt = sskip[sp]
        skip[node] = nxt
        if count[node] == 0:
            sstack[sp] = right[node]
            sskip[sp] = nxt
            sp += 1
            sstack[sp] = left[node]
            sskip[sp] = right[node]
            sp += 1
    return (
        nodes_min[:n_nodes].copy(),
        nodes_max[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        count[:n_nodes].copy(),
        skip,
        order,
    )


# ---------------------------------------------------------------------------
# BVH traversal
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _inv_comp(d):
    if d > 1e-300 or d < -1e-300:
        return 1.0 / d
    return 1e300 if d >= 0.0 else -1e300


@njit(cache=True, inline="always")
def _box_hit(bmin, bmax, ox, oy, oz, ix, iy, iz, t_lo, t_hi):
    t1 = (bmin[0] - ox) * ix
    t2 = (bmax[0] - ox) * ix
    tn = min(t1, t2)
    tf = max(t1, t2)
    t1 = (bmin[1] - oy) * iy
    t2 = (bmax[1] - oy) * iy
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    t1 = (bmin[2] - oz) * iz
    t2 = (bmax[2] - oz) * iz
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    return tn <= tf and tf > t_lo and tn < t_hi


@njit(cache=True)
def _bvh_hit(nodes_min, nodes_max, left, right, count, tv0, te1, te2, ox, oy, oz, dx, dy, dz, t_min):
    ix = _inv_comp(dx)
    iy = _inv_comp(dy)
    iz = _inv_comp(dz)
    best_t = 1e300
    best_i = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(64, dtype=np.int32)
    sp = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _box_hit(nodes_min[node], nodes_max[node], ox, oy, oz, ix, iy, iz, t_min, best_t):
            continue
        if count[node] > 0:
            start = left[node]
            for s in range(count[node]):
                i = start + s
                e1x = te1[i, 0]
                e1y = te1[i, 1]
                e1z = te1[i, 2]
                e2x = te2[i, 0]
                e2y = te2[i, 1]
                e2z = te2[i, 2]
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if det > -1e-14 and det < 1e-14:
                    continue
                inv = 1.0 / det
                tx = ox - tv0[i, 0]
                ty = oy - tv0[i, 1]
                tz = oz - tv0[i, 2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t > t_min and t < best_t:
                    best_t = t
                    best_i = i
                    best_u = u
                    best_v = v
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    return best_t, best_i, best_u, best_v


@njit(cache=True, parallel=True)
def bvh_intersect(nodes_min, nodes_max, left, right, count, skip, tv0, te1, te2, origins, dirs, t_min):
    n = origins.shape[0]
    t = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    uu = np.empty(n)
    vv = np.empty(n)
    for i in prange(n):
        bt, bi, bu, bv = _bvh_hit(
            nodes_min, nodes_max, left, right, count, tv0, te1, te2,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], t_min[i],
        )
        t[i] = bt
        idx[i] = bi
        uu[i] = bu
        vv[i] = bv
    return t, idx, uu, vv


@njit(cache=True, inline="always")
def _closest_tri(ax, ay, az, e1x, e1y, e1z, e2x, e2y, e2z, px, py, pz):
    """Squared distance and barycentric (u, v) of the closest point on one triangle."""
    apx = px - ax
    apy = py - ay
    apz = pz - az
    d1 = e1x * apx + e1y * apy + e1z * apz
    d2 = e2x * apx + e2y * apy + e2z * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz, 0.0, 0.0
    bpx = apx - e1x
    bpy = apy - e1y
    bpz = apz - e1z
    d3 = e1x * bpx + e1y * bpy + e1z * bpz
    d4 = e2x * bpx + e2y * bpy + e2z * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        w = d1 / (d1 - d3)
        qx = apx - w * e1x
        qy = apy - w * e1y
        qz = apz - w * e1z
        return qx * qx + qy * qy + qz * qz, w, 0.0
    cpx = apx - e2x
    cpy = apy - e2y
    cpz = apz - e2z
    d5 = e1x * cpx + e1y * cpy + e1z * cpz
    d6 = e2x * cpx + e2y * cpy + e2z * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        qx = apx - w * e2x
        qy = apy - w * e2y
        qz = apz - w * e2z
        return qx * qx + qy * qy + qz * qz, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bpx - w * (e2x - e1x)
        qy = bpy - w * (e2y - e1y)
        qz = bpz - w * (e2z - e1z)
        return qx * qx + qy * qy + qz * qz, 1.0 - w, w
    den = 1.0 / (va + vb + vc)
    u = vb * den
    v = vc * den
    qx = apx - u * e1x - v * e2x
    qy = apy - u * e1y - v * e2y
    qz = apz - u * e1z - v * e2z
    return qx * qx + qy * qy + qz * qz, u, v


@njit(cache=True, inline="always")
def _box_dist2(bmin, bmax, px, py, pz):
    d = 0.0
    c = px
    if c < bmin[0]:
        d += (bmin[0] - c) * (bmin[0] - c)
    elif c > bmax[0]:
        d += (c - bmax[0]) * (c - bmax[0])
    c = py
    if c < bmin[1]:
        d += (bmin[1] - c) * (bmin[1] - c)
    elif c > bmax[1]:
        d += (c - bmax[1]) * (c - bmax[1])
    c = pz
    if c < bmin[2]:
        d += (bmin[2] - c) * (bmin[2] - c)
    elif c > bmax[2]:
        d += (c - bmax[2]) * (c - bmax[2])
    return d


@njit(cache=True)
def _bvh_nearest(nodes_min, nodes_max, left, right, count, tv0, te1, te2, px, py, pz):
    best_d2 = 1e300
    best_i = 0
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(64, dtype=np.int32)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_dist2(nodes_min[node], nodes_max[node], px, py, pz) >= best_d2:
            continue
        if count[node] > 0:
            start = left[node]
            for s in range(count[node]):
                i = start + s
                d2, u, v = _closest_tri(
                    tv0[i, 0], tv0[i, 1], tv0[i, 2],
                    te1[i, 0], te1[i, 1], te1[i, 2],
                    te2[i, 0], te2[i, 1], te2[i, 2],
                    px, py, pz,
                )
                if d2 < best_d2:
                    best_d2 = d2
                    best_i = i
                    best_u = u
                    best_v = v
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    return best_d2, best_i, best_u, best_v


@njit(cache=True, parallel=True)
def bvh_closest(nodes_min, nodes_max, left, right, count, skip, tv0, te1, te2, points):
    n = points.shape[0]
    d2 = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    uu = np.empty(n)
    vv = np.empty(n)
    for i in prange(n):
        bd, bi, bu, bv = _bvh_nearest(
            nodes_min, nodes_max, left, right, count, tv0, te1, te2,
            points[i, 0], points[i, 1], points[i, 2],
        )
        d2[i] = bd
        idx[i] = bi
        uu[i] = bu
        vv[i] = bv
    return d2, idx, uu, vv


# ---------------------------------------------------------------------------
# two-bounce interface tracing through a closed mesh
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def trace_normal_pairs(
    nodes_min, nodes_max, left, right, count, skip,
    tv0, te1, te2, tn0, tn1, tn2,
    origins, dirs, ior, t_eps, grazing_eps,
):
    """First/second-surface unit normals for camera rays through a closed mesh.

    Both normals are returned outward-oriented (first opposes the incoming
    ray, second points along the interior ray). ``tir`` marks rays whose exit
    refraction has a negative radicand; rays that miss are invalid.
    """
    n = origins.shape[0]
    n1 = np.zeros((n, 3))
    n2 = np.zeros((n, 3))
    p1 = np.zeros((n, 3))
    p2 = np.zeros((n, 3))
    valid = np.zeros(n, dtype=np.uint8)
    tir = np.zeros(n, dtype=np.uint8)
    eta1 = 1.0 / ior
    for i in prange(n):
        ox = origins[i, 0]
        oy = origins[i, 1]
        oz = origins[i, 2]
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        t, tri, u, v = _bvh_hit(
            nodes_min, nodes_max, left, right, count, tv0, te1, te2, ox, oy, oz, dx, dy, dz, t_eps
        )
        if tri < 0:
            continue
        w = 1.0 - u - v
        ax = w * tn0[tri, 0] + u * tn1[tri, 0] + v * tn2[tri, 0]
        ay = w * tn0[tri, 1] + u * tn1[tri, 1] + v * tn2[tri, 1]
        az = w * tn0[tri, 2] + u * tn1[tri, 2] + v * tn2[tri, 2]
        ln = math.sqrt(ax * ax + ay * ay + az * az)
        if ln <= 0.0:
            continue
        ax /= ln
        ay /= ln
        az /= ln
        cosi = -(dx * ax + dy * ay + dz * az)
        if cosi < 0.0:  # orient against the incoming ray
            ax = -ax
            ay = -ay
            az = -az
            cosi = -cosi
        if cosi < grazing_eps:
            continue
        hx = ox + t * dx
        hy = oy + t * dy
        hz = oz + t * dz
        # refraction into the medium (never TIR for eta < 1)
        rad = 1.0 - eta1 * eta1 * (1.0 - cosi * cosi)
        ct = math.sqrt(rad)
        q = eta1 * cosi - ct
        mx = eta1 * dx + q * ax
        my = eta1 * dy + q * ay
        mz = eta1 * dz + q * az
        mn = math.sqrt(mx * mx + my * my + mz * mz)
        mx /= mn
        my /= mn
        mz /= mn
        t2, tri2, u2, v2 = _bvh_hit(
            nodes_min, nodes_max, left, right, count, tv0, te1, te2, hx, hy, hz, mx, my, mz, t_eps
        )
        if tri2 < 0:
            continue
        w2 = 1.0 - u2 - v2
        bx = w2 * tn0[tri2, 0] + u2 * tn1[tri2, 0] + v2 * tn2[tri2, 0]
        by = w2 * tn0[tri2, 1] + u2 * tn1[tri2, 1] + v2 * tn2[tri2, 1]
        bz = w2 * tn0[tri2, 2] + u2 * tn1[tri2, 2] + v2 * tn2[tri2, 2]
        ln2 = math.sqrt(bx * bx + by * by + bz * bz)
        if ln2 <= 0.0:
            continue
        bx /= ln2
        by /= ln2
        bz /= ln2
        cosi2 = mx * bx + my * by + mz * bz
        if cosi2 < 0.0:  # orient along the interior ray (outward for a closed mesh)
            bx = -bx
            by = -by
            bz = -bz
            cosi2 = -cosi2
        if cosi2 < grazing_eps:
            continue
        valid[i] = 1
        n1[i, 0] = ax
        n1[i, 1] = ay
        n1[i, 2] = az
        n2[i, 0] = bx
        n2[i, 1] = by
        n2[i, 2] = bz
        p1[i, 0] = hx
        p1[i, 1] = hy
        p1[i, 2] = hz
        p2[i, 0] = hx + t2 * mx
        p2[i, 1] = hy + t2 * my
        p2[i, 2] = hz + t2 * mz
        rad2 = 1.0 - ior * ior * (1.0 - cosi2 * cosi2)
        if rad2 < 0.0:
            tir[i] = 1
    return n1, n2, p1, p2, valid, tir


# ---------------------------------------------------------------------------
# two-bounce shading from normal maps (the differentiable rendering layer)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _shade_pixel(env, lx, ly, lz, n1x, n1y, n1z, n2x, n2y, n2z, ior):
    """Reflected and transmitted radiance for one pixel; tir flag as int."""
    eta1 = 1.0 / ior
    c1 = lx * n1x + ly * n1y + lz * n1z
    if c1 > 0.0:
        n1x = -n1x
        n1y = -n1y
        n1z = -n1z
        c1 = -c1
    ci1 = -c1
    rad1 = 1.0 - eta1 * eta1 * (1.0 - ci1 * ci1)
    ct1 = math.sqrt(rad1)
    f1 = _fresnel(ci1, ct1, eta1)
    rx = lx + 2.0 * ci1 * n1x
    ry = ly + 2.0 * ci1 * n1y
    rz = lz + 2.0 * ci1 * n1z
    er, eg, eb = _env_sample(env, rx, ry, rz)
    irr = f1 * er
    irg = f1 * eg
    irb = f1 * eb
    q1 = eta1 * ci1 - ct1
    mx = eta1 * lx + q1 * n1x
    my = eta1 * ly + q1 * n1y
    mz = eta1 * lz + q1 * n1z
    c2 = mx * n2x + my * n2y + mz * n2z
    if c2 > 0.0:
        n2x = -n2x
        n2y = -n2y
        n2z = -n2z
        c2 = -c2
    ci2 = -c2
    rad2 = 1.0 - ior * ior * (1.0 - ci2 * ci2)
    if rad2 < 0.0:
        return irr, irg, irb, 0.0, 0.0, 0.0, 1
    ct2 = math.sqrt(rad2)
    f2 = _fresnel(ci2, ct2, ior)
    q2 = ior * ci2 - ct2
    tx = ior * mx + q2 * n2x
    ty = ior * my + q2 * n2y
    tz = ior * mz + q2 * n2z
    er, eg, eb = _env_sample(env, tx, ty, tz)
    k = (1.0 - f1) * (1.0 - f2)
    return irr, irg, irb, k * er, k * eg, k * eb, 0


@njit(cache=True, parallel=True)
def render_pixels(env, dirs, n1, n2, valid, ior):
    n = dirs.shape[0]
    i_r = np.zeros((n, 3))
    i_t = np.zeros((n, 3))
    tir = np.zeros(n, dtype=np.uint8)
    for i in prange(n):
        if valid[i] == 0:
            continue
        irr, irg, irb, itr, itg, itb, is_tir = _shade_pixel(
            env,
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
            n1[i, 0], n1[i, 1], n1[i, 2],
            n2[i, 0], n2[i, 1], n2[i, 2],
            ior,
        )
        i_r[i, 0] = irr
        i_r[i, 1] = irg
        i_r[i, 2] = irb
        i_t[i, 0] = itr
        i_t[i, 1] = itg
        i_t[i, 2] = itb
        tir[i] = is_tir
    return i_r, i_t, tir


@njit(cache=True, parallel=True)
def candidate_costs(env, image, dirs, n1c, n2c, valid, ior, tir_penalty):
    """L1 rendering cost for every (first, second) candidate-normal pair."""
    n = dirs.shape[0]
    k = n1c.shape[1]
    cost = np.zeros((n, k, k))
    for i in prange(n):
        if valid[i] == 0:
            continue
        for a in range(k):
            for b in range(k):
                irr, irg, irb, itr, itg, itb, is_tir = _shade_pixel(
                    env,
                    dirs[i, 0], dirs[i, 1], dirs[i, 2],
                    n1c[i, a, 0], n1c[i, a, 1], n1c[i, a, 2],
                    n2c[i, b, 0], n2c[i, b, 1], n2c[i, b, 2],
                    ior,
                )
                if is_tir == 1:
                    cost[i, a, b] = tir_penalty
                else:
                    cost[i, a, b] = (
                        abs(image[i, 0] - irr - itr)
                        + abs(image[i, 1] - irg - itg)
                        + abs(image[i, 2] - irb - itb)
                    )
    return cost


@njit(cache=True, parallel=True)
def render_loss_grad(env, image, dirs, n1, n2, valid, ior):
    """Per-pixel squared rendering error and analytic gradients wrt both normals.

    TIR pixels carry zero loss and zero gradient; returned gradients are
    already projected onto the tangent plane of the stored (unflipped)
    normals.
    """
    n = dirs.shape[0]
    loss = np.zeros(n)
    g1 = np.zeros((n, 3))
    g2 = np.zeros((n, 3))
    tir = np.zeros(n, dtype=np.uint8)
    eta1 = 1.0 / ior
    eta2 = ior
    for i in prange(n):
        if valid[i] == 0:
            continue
        lx = dirs[i, 0]
        ly = dirs[i, 1]
        lz = dirs[i, 2]
        s1 = 1.0
        m1x = n1[i, 0]
        m1y = n1[i, 1]
        m1z = n1[i, 2]
        c1 = lx * m1x + ly * m1y + lz * m1z
        if c1 > 0.0:
            s1 = -1.0
            m1x = -m1x
            m1y = -m1y
            m1z = -m1z
            c1 = -c1
        ci1 = -c1
        rad1 = 1.0 - eta1 * eta1 * (1.0 - ci1 * ci1)
        ct1 = math.sqrt(rad1)
        f1 = _fresnel(ci1, ct1, eta1)
        q1 = eta1 * ci1 - ct1
        # reflected and refracted directions at the first surface
        rx = lx + 2.0 * ci1 * m1x
        ry = ly + 2.0 * ci1 * m1y
        rz = lz + 2.0 * ci1 * m1z
        mx = eta1 * lx + q1 * m1x
        my = eta1 * ly + q1 * m1y
        mz = eta1 * lz + q1 * m1z
        s2 = 1.0
        m2x = n2[i, 0]
        m2y = n2[i, 1]
        m2z = n2[i, 2]
        c2 = mx * m2x + my * m2y + mz * m2z
        if c2 > 0.0:
            s2 = -1.0
            m2x = -m2x
            m2y = -m2y
            m2z = -m2z
            c2 = -c2
        ci2 = -c2
        rad2 = 1.0 - eta2 * eta2 * (1.0 - ci2 * ci2)
        if rad2 < 0.0:
            tir[i] = 1
            continue
        ct2 = math.sqrt(rad2)
        f2 = _fresnel(ci2, ct2, eta2)
        q2 = eta2 * ci2 - ct2
        tx = eta2 * mx + q2 * m2x
        ty = eta2 * my + q2 * m2y
        tz = eta2 * mz + q2 * m2z

        ar, ag, ab = _env_sample(env, rx, ry, rz)
        br, bg, bb = _env_sample(env, tx, ty, tz)
        kt = (1.0 - f1) * (1.0 - f2)
        res_r = image[i, 0] - (f1 * ar + kt * br)
        res_g = image[i, 1] - (f1 * ag + kt * bg)
        res_b = image[i, 2] - (f1 * ab + kt * bb)
        loss[i] = res_r * res_r + res_g * res_g + res_b * res_b
        wr0 = -2.0 * res_r
        wr1 = -2.0 * res_g
        wr2 = -2.0 * res_b
        sa = wr0 * ar + wr1 * ag + wr2 * ab
        sb = wr0 * br + wr1 * bg + wr2 * bb

        _, grx, gry, grz = _env_sample_wgrad(env, rx, ry, rz, wr0, wr1, wr2)
        _, gtx, gty, gtz = _env_sample_wgrad(env, tx, ty, tz, wr0, wr1, wr2)

        dfc1, dft1 = _fresnel_grad(ci1, ct1, eta1)
        kf1 = dfc1 + dft1 * eta1 * eta1 * ci1 / ct1
        dfc2, dft2 = _fresnel_grad(ci2, ct2, eta2)
        kf2 = dfc2 + dft2 * eta2 * eta2 * ci2 / ct2
        k1 = eta1 * eta1 * ci1 / ct1 - eta1
        k2 = eta2 * eta2 * ci2 / ct2 - eta2

        # --- gradient wrt the oriented first normal m1 ---
        # Fresnel-1 term: (SA - (1-F2) SB) * KF1 * (-l)
        cf = (sa - (1.0 - f2) * sb) * kf1
        gx = -cf * lx
        gy = -cf * ly
        gz = -cf * lz
        # reflection lobe: F1 * (2 ci1 g_r - 2 l (m1 . g_r))
        mg = m1x * grx + m1y * gry + m1z * grz
        gx += f1 * (2.0 * ci1 * grx - 2.0 * lx * mg)
        gy += f1 * (2.0 * ci1 * gry - 2.0 * ly * mg)
        gz += f1 * (2.0 * ci1 * grz - 2.0 * lz * mg)
        # Fresnel-2 through the interior direction: -(1-F1) KF2 SB * dci2/dm1,
        # dci2/dm1 = -(k1 (m1 . m2) l + q1 m2)
        m1m2 = m1x * m2x + m1y * m2y + m1z * m2z
        cc = (1.0 - f1) * kf2 * sb
        gx += cc * (k1 * m1m2 * lx + q1 * m2x)
        gy += cc * (k1 * m1m2 * ly + q1 * m2y)
        gz += cc * (k1 * m1m2 * lz + q1 * m2z)
        # transmission lobe: (1-F1)(1-F2) J_m^T J_t^T g_t with
        # J_t^T g = eta2 g + k2 m2 (m2 . g); J_m^T h = k1 l (m1 . h) + q1 h
        m2gt = m2x * gtx + m2y * gty + m2z * gtz
        hx = eta2 * gtx + k2 * m2x * m2gt
        hy = eta2 * gty + k2 * m2y * m2gt
        hz = eta2 * gtz + k2 * m2z * m2gt
        m1h = m1x * hx + m1y * hy + m1z * hz
        gx += kt * (k1 * lx * m1h + q1 * hx)
        gy += kt * (k1 * ly * m1h + q1 * hy)
        gz += kt * (k1 * lz * m1h + q1 * hz)
        # back to the stored normal and its tangent plane
        gx *= s1
        gy *= s1
        gz *= s1
        dot = gx * n1[i, 0] + gy * n1[i, 1] + gz * n1[i, 2]
        g1[i, 0] = gx - dot * n1[i, 0]
        g1[i, 1] = gy - dot * n1[i, 1]
        g1[i, 2] = gz - dot * n1[i, 2]

        # --- gradient wrt the oriented second normal m2 ---
        # Fresnel-2 term: (1-F1) KF2 SB * lt1  (since dci2/dm2 = -lt1)
        cc2 = (1.0 - f1) * kf2 * sb
        hx2 = cc2 * mx
        hy2 = cc2 * my
        hz2 = cc2 * mz
        # transmission lobe: kt * (k2 lt1 (m2 . g_t) + q2 g_t)
        hx2 += kt * (k2 * mx * m2gt + q2 * gtx)
        hy2 += kt * (k2 * my * m2gt + q2 * gty)
        hz2 += kt * (k2 * mz * m2gt + q2 * gtz)
        hx2 *= s2
        hy2 *= s2
        hz2 *= s2
        dot2 = hx2 * n2[i, 0] + hy2 * n2[i, 1] + hz2 * n2[i, 2]
        g2[i, 0] = hx2 - dot2 * n2[i, 0]
        g2[i, 1] = hy2 - dot2 * n2[i, 1]
        g2[i, 2] = hz2 - dot2 * n2[i, 2]
    return loss, g1, g2, tir


# ---------------------------------------------------------------------------
# reference path tracer (mesh or analytic sphere geometry)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _sphere_hit(cx, cy, cz, rad, ox, oy, oz, dx, dy, dz, t_min):
    fx = ox - cx
    fy = oy - cy
    fz = oz - cz
    b = fx * dx + fy * dy + fz * dz
    c = fx * fx + fy * fy + fz * fz - rad * rad
    disc = b * b - c
    if disc < 0.0:
        return -1.0
    s = math.sqrt(disc)
    t = -b - s
    if t > t_min:
        return t
    t = -b + s
    if t > t_min:
        return t
    return -1.0


@njit(cache=True, parallel=True)
def path_trace(
    geom_kind,
    sphere_params,
    nodes_min, nodes_max, left, right, count, skip,
    tv0, te1, te2, tn0, tn1, tn2,
    env,
    cam_r, cam_c, fx, fy, cx, cy, width, height,
    ior, spp, max_bounces, seed, jitter,
    t_eps,
):
    """Monte-Carlo reference render of a dielectric under an environment map.

    Full branching at interfaces for the first 4 bounces, Fresnel-weighted
    Russian roulette beyond; paths needing more than ``max_bounces``
    interactions contribute zero. geom_kind 0 = mesh BVH, 1 = analytic
    sphere (cx, cy, cz, radius in ``sphere_params``).

    Returns (image, hit_fraction, tir_fraction); tir_fraction counts samples
    whose entry-refraction path hit total internal reflection at the second
    interface.
    """
    npx = width * height
    img = np.zeros((npx, 3))
    hitf = np.zeros(npx)
    tirf = np.zeros(npx)
    useed = np.uint64(seed)
    for pix in prange(npx):
        row = pix // width
        col = pix % width
        stk_o = np.empty((64, 3))
        stk_d = np.empty((64, 3))
        stk_w = np.empty(64)
        stk_b = np.empty(64, dtype=np.int32)
        stk_in = np.empty(64, dtype=np.uint8)
        stk_pt = np.empty(64, dtype=np.uint8)  # "pure transmission" lineage
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        nhit = 0
        ntir = 0
        for s in range(spp):
            if jitter == 1:
                ju = _rand_u01(useed, pix, s, 0) - 0.5
                jv = _rand_u01(useed, pix, s, 1) - 0.5
            else:
                ju = 0.0
                jv = 0.0
            u = col + ju
            v = row + jv
            ddx = (u - cx) / fx
            ddy = (v - cy) / fy
            wx = cam_r[0, 0] * ddx + cam_r[0, 1] * ddy + cam_r[0, 2]
            wy = cam_r[1, 0] * ddx + cam_r[1, 1] * ddy + cam_r[1, 2]
            wz = cam_r[2, 0] * ddx + cam_r[2, 1] * ddy + cam_r[2, 2]
            wn = math.sqrt(wx * wx + wy * wy + wz * wz)
            wx /= wn
            wy /= wn
            wz /= wn
            sp = 0
            stk_o[0, 0] = cam_c[0]
            stk_o[0, 1] = cam_c[1]
            stk_o[0, 2] = cam_c[2]
            stk_d[0, 0] = wx
            stk_d[0, 1] = wy
            stk_d[0, 2] = wz
            stk_w[0] = 1.0
            stk_b[0] = 0
            stk_in[0] = 0
            stk_pt[0] = 0
            sp = 1
            primary_hit = 0
            sample_tir = 0
            while sp > 0:
                sp -= 1
                ox = stk_o[sp, 0]
                oy = stk_o[sp, 1]
                oz = stk_o[sp, 2]
                dx = stk_d[sp, 0]
                dy = stk_d[sp, 1]
                dz = stk_d[sp, 2]
                w = stk_w[sp]
                b = stk_b[sp]
                inside = stk_in[sp]
                pure_t = stk_pt[sp]
                if w < 1e-12:
                    continue
                if geom_kind == 1:
                    t = _sphere_hit(
                        sphere_params[0], sphere_params[1], sphere_params[2], sphere_params[3],
                        ox, oy, oz, dx, dy, dz, t_eps,
                    )
                    tri = 0 if t > 0.0 else -1
                    bu = 0.0
                    bv = 0.0
                else:
                    t, tri, bu, bv = _bvh_hit(
                        nodes_min, nodes_max, left, right, count, tv0, te1, te2,
                        ox, oy, oz, dx, dy, dz, t_eps,
                    )
                if tri < 0:
                    er, eg, eb = _env_sample(env, dx, dy, dz)
                    acc0 += w * er
                    acc1 += w * eg
                    acc2 += w * eb
                    continue
                if b == 0:
                    primary_hit = 1
                if b >= max_bounces:
                    continue
                hx = ox + t * dx
                hy = oy + t * dy
                hz = oz + t * dz
                if geom_kind == 1:
                    inv_r = 1.0 / sphere_params[3]
                    nx = (hx - sphere_params[0]) * inv_r
                    ny = (hy - sphere_params[1]) * inv_r
                    nz = (hz - sphere_params[2]) * inv_r
                else:
                    bw = 1.0 - bu - bv
                    nx = bw * tn0[tri, 0] + bu * tn1[tri, 0] + bv * tn2[tri, 0]
                    ny = bw * tn0[tri, 1] + bu * tn1[tri, 1] + bv * tn2[tri, 1]
                    nz = bw * tn0[tri, 2] + bu * tn1[tri, 2] + bv * tn2[tri, 2]
                    ln = math.sqrt(nx * nx + ny * ny + nz * nz)
                    if ln <= 0.0:
                        continue
                    nx /= ln
                    ny /= ln
                    nz /= ln
                c = dx * nx + dy * ny + dz * nz
                if c > 0.0:
                    nx = -nx
                    ny = -ny
                    nz = -nz
                    c = -c
                ci = -c
                eta = ior if inside == 1 else 1.0 / ior
                rad = 1.0 - eta * eta * (1.0 - ci * ci)
                has_t = rad >= 0.0
                if has_t:
                    ct = math.sqrt(rad)
                    f = _fresnel(ci, ct, eta)
                else:
                    ct = 0.0
                    f = 1.0
                if (not has_t) and inside == 1 and pure_t == 1:
                    sample_tir = 1
                # reflected direction
                rx = dx + 2.0 * ci * nx
                ry = dy + 2.0 * ci * ny
                rz = dz + 2.0 * ci * nz
                if b < 4:
                    # full branching
                    if has_t and w * (1.0 - f) >= 1e-12:
                        q = eta * ci - ct
                        txd = eta * dx + q * nx
                        tyd = eta * dy + q * ny
                        tzd = eta * dz + q * nz
                        stk_o[sp, 0] = hx
                        stk_o[sp, 1] = hy
                        stk_o[sp, 2] = hz
                        stk_d[sp, 0] = txd
                        stk_d[sp, 1] = tyd
                        stk_d[sp, 2] = tzd
                        stk_w[sp] = w * (1.0 - f)
                        stk_b[sp] = b + 1
                        stk_in[sp] = 1 - inside
                        stk_pt[sp] = 1 if (b == 0) else 0
                        sp += 1
                    if w * f >= 1e-12:
                        stk_o[sp, 0] = hx
                        stk_o[sp, 1] = hy
                        stk_o[sp, 2] = hz
                        stk_d[sp, 0] = rx
                        stk_d[sp, 1] = ry
                        stk_d[sp, 2] = rz
                        stk_w[sp] = w * f
                        stk_b[sp] = b + 1
                        stk_in[sp] = inside
                        stk_pt[sp] = 0
                        sp += 1
                else:
                    # Fresnel-weighted Russian roulette
                    xi = _rand_u01(useed, pix, s, 8 + b)
                    if xi < f:
                        stk_o[sp, 0] = hx
                        stk_o[sp, 1] = hy
                        stk_o[sp, 2] = hz
                        stk_d[sp, 0] = rx
                        stk_d[sp, 1] = ry
                        stk_d[sp, 2] = rz
                        stk_w[sp] = w
                        stk_b[sp] = b + 1
                        stk_in[sp] = inside
                        stk_pt[sp] = 0
                        sp += 1
                    elif has_t:
                        q = eta * ci - ct
                        stk_o[sp, 0] = hx
                        stk_o[sp, 1] = hy
                        stk_o[sp, 2] = hz
                        stk_d[sp, 0] = eta * dx + q * nx
                        stk_d[sp, 1] = eta * dy + q * ny
                        stk_d[sp, 2] = eta * dz + q * nz
                        stk_w[sp] = w
                        stk_b[sp] = b + 1
                        stk_in[sp] = 1 - inside
                        stk_pt[sp] = 0
                        sp += 1
            nhit += primary_hit
            ntir += sample_tir
        inv = 1.0 / spp
        img[pix, 0] = acc0 * inv
        img[pix, 1] = acc1 * inv
        img[pix, 2] = acc2 * inv
        hitf[pix] = nhit * inv
        tirf[pix] = ntir * inv
    return img, hitf, tirf


# ---------------------------------------------------------------------------
# visual-hull carving
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def carve_grid(masks, cam_rt, cam_t, cam_k, origin, step, res):
    """Occupancy by the center-point test.

    A voxel stays occupied unless some view sees its center project in-frame
    onto an unmasked pixel; behind-camera and out-of-frame impose nothing.
    ``cam_rt`` holds world->camera rotations, ``cam_k`` rows are
    (fx, fy, cx, cy).
    """
    nx, ny, nz = res[0], res[1], res[2]
    nviews = masks.shape[0]
    hgt = masks.shape[1]
    wid = masks.shape[2]
    occ = np.zeros((nx, ny, nz), dtype=np.uint8)
    for i in prange(nx):
        px = origin[0] + (i + 0.5) * step[0]
        for j in range(ny):
            py = origin[1] + (j + 0.5) * step[1]
            for k in range(nz):
                pz = origin[2] + (k + 0.5) * step[2]
                keep = True
                for v in range(nviews):
                    rx = px - cam_t[v, 0]
                    ry = py - cam_t[v, 1]
                    rz = pz - cam_t[v, 2]
                    xc = cam_rt[v, 0, 0] * rx + cam_rt[v, 0, 1] * ry + cam_rt[v, 0, 2] * rz
                    yc = cam_rt[v, 1, 0] * rx + cam_rt[v, 1, 1] * ry + cam_rt[v, 1, 2] * rz
                    zc = cam_rt[v, 2, 0] * rx + cam_rt[v, 2, 1] * ry + cam_rt[v, 2, 2] * rz
                    if zc <= 0.0:
                        continue
                    u = cam_k[v, 0] * xc / zc + cam_k[v, 2]
                    vv = cam_k[v, 1] * yc / zc + cam_k[v, 3]
                    iu = int(math.floor(u + 0.5))
                    iv = int(math.floor(vv + 0.5))
                    if iu < 0 or iu >= wid or iv < 0 or iv >= hgt:
                        continue
                    if masks[v, iv, iu] == 0:
                        keep = False
                        break
                if keep:
                    occ[i, j, k] = 1
    return occ
