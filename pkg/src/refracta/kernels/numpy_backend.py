"""Pure-numpy implementations of the hot kernels.

Same function names and array contracts as ``numba_backend``. Ray queries
use the BVH's threaded skip links so whole ray batches advance in lockstep
without per-ray stacks; the path tracer is a wavefront loop over bounce
generations. Within-array accumulation (np.add.at) is sequential, so results
are deterministic, though bit-level summation order differs from the jit
backend.
"""

import numpy as np

U64 = np.uint64
_GOLDEN = U64(0x9E3779B97F4A7C15)
_MIX1 = U64(0xBF58476D1CE4E5B9)
_MIX2 = U64(0x94D049BB133111EB)


def _mix64(z):
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> U64(30))) * _MIX1
        z = (z ^ (z >> U64(27))) * _MIX2
        return z ^ (z >> U64(31))


def rand_u01(seed, pixel, sample, dim):
    h = _mix64(np.broadcast_to(U64(seed), np.shape(pixel)).copy())
    h = _mix64(h ^ pixel.astype(U64))
    h = _mix64(h ^ np.asarray(sample, dtype=U64))
    h = _mix64(h ^ np.broadcast_to(U64(dim), np.shape(pixel)))
    return (h >> U64(11)) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# vectorized optics pieces
# ---------------------------------------------------------------------------


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _orient_against(l, n):
    """Flip normals to oppose ray directions; returns (m, cos_i, sign)."""
    c = _dot(l, n)
    sign = np.where(c > 0.0, -1.0, 1.0)
    m = n * sign[..., None]
    return m, np.abs(c), sign


def fresnel_np(ci, ct, eta):
    rp = (ci - eta * ct) / (ci + eta * ct)
    rs = (eta * ci - ct) / (eta * ci + ct)
    return np.clip(0.5 * (rp * rp + rs * rs), 0.0, 1.0)


def _fresnel_grad_np(ci, ct, eta):
    dp = ci + eta * ct
    ds = eta * ci + ct
    rp = (ci - eta * ct) / dp
    rs = (eta * ci - ct) / ds
    dci = rp * 2.0 * eta * ct / (dp * dp) + rs * 2.0 * eta * ct / (ds * ds)
    dct = -rp * 2.0 * eta * ci / (dp * dp) - rs * 2.0 * eta * ci / (ds * ds)
    return dci, dct


def _env_uv_arrays(data, dirs):
    h, w = data.shape[0], data.shape[1]
    n = np.linalg.norm(dirs, axis=-1, keepdims=True)
    d = dirs / np.where(n > 0, n, 1.0)
    u = np.arctan2(d[:, 0], -d[:, 2]) / (2.0 * np.pi) + 0.5
    v = np.arccos(np.clip(d[:, 1], -1.0, 1.0)) / np.pi
    x = u * w - 0.5
    y = np.clip(v * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x1 = (x0 + 1) % w
    x0 = x0 % w
    y1 = np.minimum(y0 + 1, h - 1)
    return d, x0, x1, y0, y1, fx, fy


def env_sample_np(data, dirs):
    _, x0, x1, y0, y1, fx, fy = _env_uv_arrays(data, dirs)
    wx = fx[:, None]
    wy = fy[:, None]
    return (
        data[y0, x0] * (1 - wx) * (1 - wy)
        + data[y0, x1] * wx * (1 - wy)
        + data[y1, x0] * (1 - wx) * wy
        + data[y1, x1] * wx * wy
    )


def env_sample_wgrad_np(data, dirs, weights):
    """(values (N,3), tangent-projected gradient of sum_c w_c E_c (N,3))."""
    h, w = data.shape[0], data.shape[1]
    d, x0, x1, y0, y1, fx, fy = _env_uv_arrays(data, dirs)
    t00 = data[y0, x0]
    t10 = data[y0, x1]
    t01 = data[y1, x0]
    t11 = data[y1, x1]
    wx = fx[:, None]
    wy = fy[:, None]
    val = t00 * (1 - wx) * (1 - wy) + t10 * wx * (1 - wy) + t01 * (1 - wx) * wy + t11 * wx * wy
    dEdu = np.sum(weights * ((1 - wy) * (t10 - t00) + wy * (t11 - t01)), axis=1) * w
    dEdv = np.sum(weights * ((1 - wx) * (t01 - t00) + wx * (t11 - t10)), axis=1) * h
    denom = d[:, 0] ** 2 + d[:, 2] ** 2
    inv2pi = 1.0 / (2.0 * np.pi)
    safe = denom > 1e-12
    gux = np.where(safe, inv2pi * (-d[:, 2]) / np.where(safe, denom, 1.0), 0.0)
    guz = np.where(safe, inv2pi * d[:, 0] / np.where(safe, denom, 1.0), 0.0)
    s2 = 1.0 - d[:, 1] ** 2
    polar = s2 > 1e-12
    gvy = np.where(polar, -1.0 / (np.pi * np.sqrt(np.where(polar, s2, 1.0))), 0.0)
    g = np.stack([dEdu * gux, dEdv * gvy, dEdu * guz], axis=1)
    g -= _dot(g, d)[:, None] * d
    return val, g


# ---------------------------------------------------------------------------
# BVH traversal with skip links (stackless, lockstep over rays)
# ---------------------------------------------------------------------------


def _moller_trumbore(v0, e1, e2, o, d, t_min, best_t):
    p = np.cross(d, e2)
    det = _dot(e1, p)
    ok = np.abs(det) >= 1e-14
    inv = 1.0 / np.where(ok, det, 1.0)
    tv = o - v0
    u = _dot(tv, p) * inv
    ok &= (u >= 0.0) & (u <= 1.0)
    q = np.cross(tv, e1)
    v = _dot(d, q) * inv
    ok &= (v >= 0.0) & (u + v <= 1.0)
    t = _dot(e2, q) * inv
    ok &= (t > t_min) & (t < best_t)
    return ok, t, u, v


def bvh_intersect(nodes_min, nodes_max, left, right, count, skip, tv0, te1, te2, origins, dirs, t_min):
    n = origins.shape[0]
    best_t = np.full(n, 1e300)
    best_i = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    if len(tv0) == 0:
        return best_t, best_i, best_u, best_v
    d_safe = np.where(np.abs(dirs) > 1e-300, dirs, np.where(dirs >= 0, 1e-300, -1e-300))
    with np.errstate(over="ignore"):
        inv_d = 1.0 / d_safe
    cur = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    while True:
        act = np.nonzero(alive)[0]
        if len(act) == 0:
            break
        node = cur[act]
        bmin = nodes_min[node]
        bmax = nodes_max[node]
        o = origins[act]
        inv = inv_d[act]
        with np.errstate(over="ignore", invalid="ignore"):
            t1 = (bmin - o) * inv
            t2 = (bmax - o) * inv
        tn = np.max(np.minimum(t1, t2), axis=1)
        tf = np.min(np.maximum(t1, t2), axis=1)
        box_hit = (tn <= tf) & (tf > t_min[act]) & (tn < best_t[act])
        leaf = count[node] > 0
        # gather rays sitting at a hit leaf and test its triangles
        hl = box_hit & leaf
        if np.any(hl):
            ridx = act[hl]
            lnode = node[hl]
            start = left[lnode].astype(np.int64)
            cnt = count[lnode]
            for s in range(int(cnt.max())):
                sel = cnt > s
                rr = ridx[sel]
                tri = start[sel] + s
                ok, t, u, v = _moller_trumbore(
                    tv0[tri], te1[tri], te2[tri], origins[rr], dirs[rr], t_min[rr], best_t[rr]
                )
                upd = rr[ok]
                best_t[upd] = t[ok]
                best_i[upd] = tri[ok]
                best_u[upd] = u[ok]
                best_v[upd] = v[ok]
        # descend into hit internal nodes; otherwise follow the skip link
        nxt = np.where(box_hit & ~leaf, left[node].astype(np.int64), skip[node].astype(np.int64))
        cur[act] = nxt
        alive[act] = nxt >= 0
    return best_t, best_i, best_u, best_v


def _closest_tri_np(v0, e1, e2, p):
    """Vectorized Ericson closest-point-on-triangle; returns (d2, u, v)."""
    ap = p - v0
    d1 = _dot(e1, ap)
    d2_ = _dot(e2, ap)
    bp = ap - e1
    d3 = _dot(e1, bp)
    d4 = _dot(e2, bp)
    cp = ap - e2
    d5 = _dot(e1, cp)
    d6 = _dot(e2, cp)
    vc = d1 * d4 - d3 * d2_
    vb = d5 * d2_ - d1 * d6
    va = d3 * d6 - d5 * d4

    u = np.zeros(len(p))
    v = np.zeros(len(p))
    done = np.zeros(len(p), dtype=bool)

    m = (d1 <= 0) & (d2_ <= 0)
    done |= m

    m = ~done & (d3 >= 0) & (d4 <= d3)
    u[m] = 1.0
    done |= m

    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    w = d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0)
    u[m] = w[m]
    done |= m

    m = ~done & (d6 >= 0) & (d5 <= d6)
    u[m] = 0.0
    v[m] = 1.0
    done |= m

    m = ~done & (vb <= 0) & (d2_ >= 0) & (d6 <= 0)
    w = d2_ / np.where(d2_ - d6 != 0, d2_ - d6, 1.0)
    v[m] = w[m]
    done |= m

    m = ~done & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    dd = (d4 - d3) + (d5 - d6)
    w = (d4 - d3) / np.where(dd != 0, dd, 1.0)
    u[m] = 1.0 - w[m]
    v[m] = w[m]
    done |= m

    m = ~done
    den = va + vb + vc
    den = np.where(den != 0, den, 1.0)
    u[m] = (vb / den)[m]
    v[m] = (vc / den)[m]

    q = v0 + u[:, None] * e1 + v[:, None] * e2 - p
    return _dot(q, q), u, v


def bvh_closest(nodes_min, nodes_max, left, right, count, skip, tv0, te1, te2, points):
    n = points.shape[0]
    best_d2 = np.full(n, 1e300)
    best_i = np.zeros(n, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    if len(tv0) == 0:
        return best_d2, best_i, best_u, best_v
    cur = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    while True:
        act = np.nonzero(alive)[0]
        if len(act) == 0:
            break
        node = cur[act]
        p = points[act]
        lo = np.maximum(nodes_min[node] - p, 0.0)
        hi = np.maximum(p - nodes_max[node], 0.0)
        box_d2 = _dot(lo, lo) + _dot(hi, hi)
        box_hit = box_d2 < best_d2[act]
        leaf = count[node] > 0
        hl = box_hit & leaf
        if np.any(hl):
            ridx = act[hl]
            lnode = node[hl]
            start = left[lnode].astype(np.int64)
            cnt = count[lnode]
            for s in range(int(cnt.max())):
                sel = cnt > s
                rr = ridx[sel]
                tri = start[sel] + s
                d2, u, v = _closest_tri_np(tv0[tri], te1[tri], te2[tri], points[rr])
                ok = d2 < best_d2[rr]
                upd = rr[ok]
                best_d2[upd] = d2[ok]
                best_i[upd] = tri[ok]
                best_u[upd] = u[ok]
                best_v[upd] = v[ok]
        nxt = np.where(box_hit & ~leaf, left[node].astype(np.int64), skip[node].astype(np.int64))
        cur[act] = nxt
        alive[act] = nxt >= 0
    return best_d2, best_i, best_u, best_v


# ---------------------------------------------------------------------------
# two-bounce interface tracing
# ---------------------------------------------------------------------------


def trace_normal_pairs(
    nodes_min, nodes_max, left, right, count, skip,
    tv0, te1, te2, tn0, tn1, tn2,
    origins, dirs, ior, t_eps, grazing_eps,
):
    n = origins.shape[0]
    out_n1 = np.zeros((n, 3))
    out_n2 = np.zeros((n, 3))
    out_p1 = np.zeros((n, 3))
    out_p2 = np.zeros((n, 3))
    valid = np.zeros(n, dtype=np.uint8)
    tir = np.zeros(n, dtype=np.uint8)
    tmin = np.full(n, t_eps)
    t, tri, u, v = bvh_intersect(
        nodes_min, nodes_max, left, right, count, skip, tv0, te1, te2, origins, dirs, tmin
    )
    hit = tri >= 0
    if not np.any(hit):
        return out_n1, out_n2, out_p1, out_p2, valid, tir
    hidx = np.nonzero(hit)[0]
    ti = tri[hidx]
    w = (1.0 - u - v)[hidx, None]
    nrm = w * tn0[ti] + u[hidx, None] * tn1[ti] + v[hidx, None] * tn2[ti]
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    ok = ln[:, 0] > 0
    nrm = nrm / np.where(ln > 0, ln, 1.0)
    d = dirs[hidx]
    m1, ci1, _ = _orient_against(d, nrm)
    ok &= ci1 >= grazing_eps
    hidx = hidx[ok]
    if len(hidx) == 0:
        return out_n1, out_n2, out_p1, out_p2, valid, tir
    m1 = m1[ok]
    ci1 = ci1[ok]
    d = d[ok]
    p1 = origins[hidx] + t[hidx, None] * dirs[hidx]
    eta1 = 1.0 / ior
    ct1 = np.sqrt(1.0 - eta1 * eta1 * (1.0 - ci1 * ci1))
    q1 = eta1 * ci1 - ct1
    lm = eta1 * d + q1[:, None] * m1
    lm /= np.linalg.norm(lm, axis=1, keepdims=True)
    t2, tri2, u2, v2 = bvh_intersect(
        nodes_min, nodes_max, left, right, count, skip, tv0, te1, te2,
        np.ascontiguousarray(p1), np.ascontiguousarray(lm), np.full(len(p1), t_eps),
    )
    hit2 = tri2 >= 0
    keep = np.nonzero(hit2)[0]
    if len(keep) == 0:
        return out_n1, out_n2, out_p1, out_p2, valid, tir
    ti2 = tri2[keep]
    w2 = (1.0 - u2 - v2)[keep, None]
    nrm2 = w2 * tn0[ti2] + u2[keep, None] * tn1[ti2] + v2[keep, None] * tn2[ti2]
    ln2 = np.linalg.norm(nrm2, axis=1, keepdims=True)
    ok2 = ln2[:, 0] > 0
    nrm2 = nrm2 / np.where(ln2 > 0, ln2, 1.0)
    # orient along the interior ray (outward for a closed mesh)
    c2 = _dot(lm[keep], nrm2)
    flip = c2 < 0
    nrm2[flip] = -nrm2[flip]
    c2 = np.abs(c2)
    ok2 &= c2 >= grazing_eps
    fin = hidx[keep[ok2]]
    valid[fin] = 1
    out_n1[fin] = m1[keep[ok2]]
    out_n2[fin] = nrm2[ok2]
    out_p1[fin] = p1[keep[ok2]]
    out_p2[fin] = p1[keep[ok2]] + t2[keep[ok2], None] * lm[keep[ok2]]
    rad2 = 1.0 - ior * ior * (1.0 - c2[ok2] ** 2)
    tir[fin] = (rad2 < 0.0).astype(np.uint8)
    return out_n1, out_n2, out_p1, out_p2, valid, tir


# ---------------------------------------------------------------------------
# shading, cost volume, loss gradient
# ---------------------------------------------------------------------------


def _shade_np(env, d, n1, n2, ior):
    """Vectorized two-bounce shade; returns (ir, it, tir mask, pieces dict)."""
    eta1 = 1.0 / ior
    m1, ci1, s1 = _orient_against(d, n1)
    ct1 = np.sqrt(1.0 - eta1 * eta1 * (1.0 - ci1 * ci1))
    f1 = fresnel_np(ci1, ct1, eta1)
    refl = d + 2.0 * ci1[:, None] * m1
    q1 = eta1 * ci1 - ct1
    lm = eta1 * d + q1[:, None] * m1
    m2, ci2, s2 = _orient_against(lm, n2)
    rad2 = 1.0 - ior * ior * (1.0 - ci2 * ci2)
    tir = rad2 < 0.0
    ct2 = np.sqrt(np.where(tir, 0.0, rad2))
    f2 = fresnel_np(ci2, ct2, ior)
    q2 = ior * ci2 - ct2
    lt = ior * lm + q2[:, None] * m2
    ir = f1[:, None] * env_sample_np(env, refl)
    kt = np.where(tir, 0.0, (1.0 - f1) * (1.0 - f2))
    it = kt[:, None] * env_sample_np(env, lt)
    it[tir] = 0.0
    pieces = {
        "m1": m1, "ci1": ci1, "ct1": ct1, "f1": f1, "s1": s1, "q1": q1,
        "refl": refl, "lm": lm,
        "m2": m2, "ci2": ci2, "ct2": ct2, "f2": f2, "s2": s2, "q2": q2,
        "lt": lt, "kt": kt,
    }
    return ir, it, tir, pieces


def render_pixels(env, dirs, n1, n2, valid, ior):
    n = dirs.shape[0]
    i_r = np.zeros((n, 3))
    i_t = np.zeros((n, 3))
    tir = np.zeros(n, dtype=np.uint8)
    idx = np.nonzero(valid != 0)[0]
    if len(idx):
        ir, it, tirm, _ = _shade_np(env, dirs[idx], n1[idx], n2[idx], ior)
        i_r[idx] = ir
        i_t[idx] = it
        tir[idx] = tirm.astype(np.uint8)
    return i_r, i_t, tir


def candidate_costs(env, image, dirs, n1c, n2c, valid, ior, tir_penalty):
    n, k = n1c.shape[0], n1c.shape[1]
    cost = np.zeros((n, k, k))
    idx = np.nonzero(valid != 0)[0]
    if not len(idx):
        return cost
    for a in range(k):
        for b in range(k):
            ir, it, tirm, _ = _shade_np(env, dirs[idx], n1c[idx, a], n2c[idx, b], ior)
            c = np.sum(np.abs(image[idx] - ir - it), axis=1)
            cost[idx, a, b] = np.where(tirm, tir_penalty, c)
    return cost


def render_loss_grad(env, image, dirs, n1, n2, valid, ior):
    n = dirs.shape[0]
    loss = np.zeros(n)
    g1 = np.zeros((n, 3))
    g2 = np.zeros((n, 3))
    tir_out = np.zeros(n, dtype=np.uint8)
    idx = np.nonzero(valid != 0)[0]
    if not len(idx):
        return loss, g1, g2, tir_out
    d = dirs[idx]
    ir, it, tirm, pc = _shade_np(env, d, n1[idx], n2[idx], ior)
    tir_out[idx] = tirm.astype(np.uint8)
    live = ~tirm
    if not np.any(live):
        return loss, g1, g2, tir_out
    sub = idx[live]
    d = d[live]
    m1 = pc["m1"][live]
    ci1 = pc["ci1"][live]
    ct1 = pc["ct1"][live]
    f1 = pc["f1"][live]
    s1 = pc["s1"][live]
    q1 = pc["q1"][live]
    refl = pc["refl"][live]
    lm = pc["lm"][live]
    m2 = pc["m2"][live]
    ci2 = pc["ci2"][live]
    ct2 = pc["ct2"][live]
    f2 = pc["f2"][live]
    s2 = pc["s2"][live]
    q2 = pc["q2"][live]
    lt = pc["lt"][live]
    kt = pc["kt"][live]
    eta1 = 1.0 / ior
    eta2 = ior

    a_val = env_sample_np(env, refl)
    b_val = env_sample_np(env, lt)
    resid = image[sub] - (f1[:, None] * a_val + kt[:, None] * b_val)
    loss[sub] = np.sum(resid * resid, axis=1)
    wr = -2.0 * resid
    sa = np.sum(wr * a_val, axis=1)
    sb = np.sum(wr * b_val, axis=1)
    _, gr = env_sample_wgrad_np(env, refl, wr)
    _, gt = env_sample_wgrad_np(env, lt, wr)

    dfc1, dft1 = _fresnel_grad_np(ci1, ct1, eta1)
    kf1 = dfc1 + dft1 * eta1 * eta1 * ci1 / ct1
    dfc2, dft2 = _fresnel_grad_np(ci2, ct2, eta2)
    kf2 = dfc2 + dft2 * eta2 * eta2 * ci2 / ct2
    k1 = eta1 * eta1 * ci1 / ct1 - eta1
    k2 = eta2 * eta2 * ci2 / ct2 - eta2

    cf = (sa - (1.0 - f2) * sb) * kf1
    g = -cf[:, None] * d
    mg = _dot(m1, gr)
    g += f1[:, None] * (2.0 * ci1[:, None] * gr - 2.0 * mg[:, None] * d)
    m1m2 = _dot(m1, m2)
    cc = ((1.0 - f1) * kf2 * sb)[:, None]
    g += cc * (k1[:, None] * m1m2[:, None] * d + q1[:, None] * m2)
    m2gt = _dot(m2, gt)
    hvec = eta2 * gt + (k2 * m2gt)[:, None] * m2
    m1h = _dot(m1, hvec)
    g += kt[:, None] * ((k1 * m1h)[:, None] * d + q1[:, None] * hvec)
    g *= s1[:, None]
    nn1 = n1[sub]
    g -= _dot(g, nn1)[:, None] * nn1
    g1[sub] = g

    h2 = ((1.0 - f1) * kf2 * sb)[:, None] * lm
    h2 += kt[:, None] * ((k2 * m2gt)[:, None] * lm + q2[:, None] * gt)
    h2 *= s2[:, None]
    nn2 = n2[sub]
    h2 -= _dot(h2, nn2)[:, None] * nn2
    g2[sub] = h2
    return loss, g1, g2, tir_out


# ---------------------------------------------------------------------------
# reference path tracer (wavefront)
# ---------------------------------------------------------------------------


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
    npx = width * height
    img = np.zeros((npx, 3))
    hitf = np.zeros(npx)
    tirf = np.zeros(npx)
    # chunk pixels so the wavefront arrays stay modest
    chunk = max(1, int(2_000_000 // max(spp, 1)))
    for lo in range(0, npx, chunk):
        hi = min(npx, lo + chunk)
        pix = np.repeat(np.arange(lo, hi, dtype=np.int64), spp)
        smp = np.tile(np.arange(spp, dtype=np.int64), hi - lo)
        if jitter == 1:
            ju = rand_u01(seed, pix, smp, 0) - 0.5
            jv = rand_u01(seed, pix, smp, 1) - 0.5
        else:
            ju = np.zeros(len(pix))
            jv = np.zeros(len(pix))
        u = (pix % width) + ju
        v = (pix // width) + jv
        dcam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones(len(pix))], axis=1)
        d = dcam @ cam_r.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(cam_c, d.shape).copy()
        w = np.ones(len(pix))
        b = np.zeros(len(pix), dtype=np.int64)
        inside = np.zeros(len(pix), dtype=bool)
        pure = np.zeros(len(pix), dtype=bool)
        cur_pix, cur_smp = pix, smp

        while len(o):
            if geom_kind == 1:
                sc = sphere_params[:3]
                rad = sphere_params[3]
                oc = o - sc
                bq = _dot(oc, d)
                cq = _dot(oc, oc) - rad * rad
                disc = bq * bq - cq
                has = disc >= 0
                sq = np.sqrt(np.where(has, disc, 0.0))
                t0 = -bq - sq
                t1 = -bq + sq
                t = np.where(t0 > t_eps, t0, t1)
                hit = has & (t > t_eps)
                tri = np.where(hit, 0, -1)
                bu = np.zeros(len(o))
                bv = np.zeros(len(o))
            else:
                t, tri, bu, bv = bvh_intersect(
                    nodes_min, nodes_max, left, right, count, skip, tv0, te1, te2,
                    np.ascontiguousarray(o), np.ascontiguousarray(d), np.full(len(o), t_eps),
                )
                hit = tri >= 0
            miss = ~hit
            if np.any(miss):
                vals = env_sample_np(env, d[miss])
                np.add.at(img, cur_pix[miss], w[miss, None] * vals)
            prim = hit & (b == 0)
            if np.any(prim):
                np.add.at(hitf, cur_pix[prim], 1.0)
            cont = hit & (b < max_bounces)
            if not np.any(cont):
                break
            o = o[cont] + t[cont, None] * d[cont]
            d = d[cont]
            w = w[cont]
            b = b[cont]
            inside = inside[cont]
            pure = pure[cont]
            cur_pix = cur_pix[cont]
            cur_smp = cur_smp[cont]
            if geom_kind == 1:
                nrm = (o - sphere_params[:3]) / sphere_params[3]
            else:
                ti = tri[cont]
                ww = (1.0 - bu - bv)[cont, None]
                nrm = ww * tn0[ti] + bu[cont, None] * tn1[ti] + bv[cont, None] * tn2[ti]
                nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
            m, ci, _ = _orient_against(d, nrm)
            eta = np.where(inside, ior, 1.0 / ior)
            radq = 1.0 - eta * eta * (1.0 - ci * ci)
            has_t = radq >= 0.0
            ct = np.sqrt(np.where(has_t, radq, 0.0))
            f = np.where(has_t, fresnel_np(ci, ct, eta), 1.0)
            tire = (~has_t) & inside & pure
            if np.any(tire):
                np.add.at(tirf, cur_pix[tire], 1.0)
            refl = d + 2.0 * ci[:, None] * m
            q = eta * ci - ct
            trans = eta[:, None] * d + q[:, None] * m

            branch = b < 4
            # branching generation: reflection children + refraction children
            keep_r = branch & (w * f >= 1e-12)
            keep_t = branch & has_t & (w * (1.0 - f) >= 1e-12)
            # roulette generation
            rl = ~branch
            if np.any(rl):
                xi = np.zeros(len(o))
                for depth in np.unique(b[rl]):
                    msel = rl & (b == depth)
                    xi[msel] = rand_u01(seed, cur_pix[msel], cur_smp[msel], 8 + int(depth))
                go_r = rl & (xi < f)
                go_t = rl & ~go_r & has_t
            else:
                go_r = np.zeros(len(o), dtype=bool)
                go_t = np.zeros(len(o), dtype=bool)

            parts = []
            sel = keep_r | go_r
            if np.any(sel):
                parts.append((
                    o[sel], refl[sel], np.where(keep_r[sel], w[sel] * f[sel], w[sel]),
                    b[sel] + 1, inside[sel], np.zeros(int(sel.sum()), dtype=bool),
                    cur_pix[sel], cur_smp[sel],
                ))
            sel = keep_t | go_t
            if np.any(sel):
                parts.append((
                    o[sel], trans[sel], np.where(keep_t[sel], w[sel] * (1.0 - f[sel]), w[sel]),
                    b[sel] + 1, ~inside[sel], (b[sel] == 0),
                    cur_pix[sel], cur_smp[sel],
                ))
            if not parts:
                break
            o = np.concatenate([p[0] for p in parts])
            d = np.concatenate([p[1] for p in parts])
            w = np.concatenate([p[2] for p in parts])
            b = np.concatenate([p[3] for p in parts])
            inside = np.concatenate([p[4] for p in parts])
            pure = np.concatenate([p[5] for p in parts])
            cur_pix = np.concatenate([p[6] for p in parts])
            cur_smp = np.concatenate([p[7] for p in parts])
    inv = 1.0 / spp
    return img * inv, hitf * inv, tirf * inv


# ---------------------------------------------------------------------------
# visual-hull carving
# ---------------------------------------------------------------------------


def carve_grid(masks, cam_rt, cam_t, cam_k, origin, step, res):
    nx, ny, nz = int(res[0]), int(res[1]), int(res[2])
    nviews, hgt, wid = masks.shape
    ii, jj, kk = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    centers = np.stack(
        [
            origin[0] + (ii.ravel() + 0.5) * step[0],
            origin[1] + (jj.ravel() + 0.5) * step[1],
            origin[2] + (kk.ravel() + 0.5) * step[2],
        ],
        axis=1,
    )
    occ = np.ones(len(centers), dtype=bool)
    for v in range(nviews):
        pc = (centers - cam_t[v]) @ cam_rt[v].T
        z = pc[:, 2]
        front = z > 0
        zsafe = np.where(front, z, 1.0)
        u = cam_k[v, 0] * pc[:, 0] / zsafe + cam_k[v, 2]
        vv = cam_k[v, 1] * pc[:, 1] / zsafe + cam_k[v, 3]
        iu = np.floor(u + 0.5).astype(np.int64)
        iv = np.floor(vv + 0.5).astype(np.int64)
        inframe = front & (iu >= 0) & (iu < wid) & (iv >= 0) & (iv < hgt)
        iun = np.where(inframe, iu, 0)
        ivn = np.where(inframe, iv, 0)
        inside_mask = masks[v][ivn, iun] != 0
        occ &= ~inframe | inside_mask
    return occ.reshape(nx, ny, nz).astype(np.uint8)
