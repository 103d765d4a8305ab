"""Numba kernels shared by the caster, the oracle and the BVH baseline.

Vectors are plain 3-tuples of float64 inside kernels; stored geometry and
ray directions are float32 and are widened on load.  Every function here is
``nogil`` so the pure-Python drivers can run partitions on a thread pool.

Sensor parameters travel as a packed set of arrays indexed by origin ``n``:

    org[n]        origin (3,)
    basis[n]      rows forward, right, up (3, 3)
    ipar[n]       gamma, chi, offset, full_azimuth, h_noise, v_noise
    fpar[n]       theta0, dtheta, phi0, dphi, d_min, d_max
    theta_star[n] perturbed azimuth per ray index (only read if h_noise)
    phi_star[n]   perturbed elevation per channel (only read if v_noise)
"""

import math

import numpy as np
from numba import njit

EPS_GUARD = 1e-4
PLANE_PHI = 1e-12
POLAR_COS = 1e-12
C2_LINEAR = 1e-12
MT_COS_GUARD = 1e-9
DEDUP_DIST = 1e-5

FACING_FRONT = 0
FACING_BACK = 1
FACING_BOTH = 2

FLAG_ACTIVE = 1
FLAG_APEX_POS = 2
FLAG_APEX_NEG = 4
FLAG_ALL_CW = 8

NEAR_FARTHEST = 0
NEAR_CLOSEST = 1

# filter outcomes
PASS = 0
REJECT_BACKFACE = 1
REJECT_AREA = 2
REJECT_RANGE = 3

# counter slots
C_BACKFACE = 0
C_AREA = 1
C_RANGE = 2
C_NOCHANNEL = 3
C_SAT = 4
C_BAT = 5
C_RTIC = 6
C_AUX = 7
N_COUNTERS = 8

ENC_INF = np.uint32(0xFF800000)

# np.float64(...) rather than float(...): numba keeps float32 through float()
_jit = njit(cache=True, nogil=True)


@_jit
def dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@_jit
def sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


@_jit
def add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


@_jit
def scale(a, s):
    return (a[0] * s, a[1] * s, a[2] * s)


@_jit
def cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


@_jit
def norm(a):
    return math.sqrt(dot(a, a))


@_jit
def row(arr, k):
    return (np.float64(arr[k, 0]), np.float64(arr[k, 1]), np.float64(arr[k, 2]))


@_jit
def tri_vertices(tris, k):
    t = tris[k]
    return (
        (np.float64(t[0, 0]), np.float64(t[0, 1]), np.float64(t[0, 2])),
        (np.float64(t[1, 0]), np.float64(t[1, 1]), np.float64(t[1, 2])),
        (np.float64(t[2, 0]), np.float64(t[2, 1]), np.float64(t[2, 2])),
    )


@_jit
def ray_at(dirs, g):
    return (np.float64(dirs[0, g]), np.float64(dirs[1, g]), np.float64(dirs[2, g]))


# ---------------------------------------------------------------------------
# encoding


@_jit
def encode(d):
    u = np.float32(d).view(np.uint32)
    m = np.uint32(np.uint32(0) - np.uint32(u >> np.uint32(31))) | np.uint32(0x80000000)
    return np.uint32(u ^ m)


@_jit
def decode(u):
    m = np.uint32(np.uint32(np.uint32(u >> np.uint32(31)) - np.uint32(1)) | np.uint32(0x80000000))
    return np.uint32(u ^ m).view(np.float32)


@_jit
def record(buf, g, t):
    e = encode(t)
    if e < buf[g]:
        buf[g] = e


# ---------------------------------------------------------------------------
# primitives


@_jit
def ray_direction(theta, phi, f, r, u):
    ct = math.cos(theta)
    st = math.sin(theta)
    cp = math.cos(phi)
    sp = math.sin(phi)
    return (
        ct * cp * f[0] + st * cp * r[0] + sp * u[0],
        ct * cp * f[1] + st * cp * r[1] + sp * u[1],
        ct * cp * f[2] + st * cp * r[2] + sp * u[2],
    )


@_jit
def round_clamp(x, n):
    i = int(math.floor(x + 0.5))
    if i < 0:
        return 0
    if i > n - 1:
        return n - 1
    return i


@_jit
def argmin3(angle, i, star, n):
    best = i
    best_err = abs(angle - star[i])
    if i - 1 >= 0:
        e = abs(angle - star[i - 1])
        if e < best_err:
            best = i - 1
            best_err = e
    if i + 1 < n:
        e = abs(angle - star[i + 1])
        if e < best_err:
            best = i + 1
    return best


@_jit
def elevation_of(d, u):
    ln = norm(d)
    s = dot(d, u) / ln
    if s > 1.0:
        s = 1.0
    elif s < -1.0:
        s = -1.0
    return math.asin(s)


@_jit
def azimuth_of(d, f, r, u):
    a = dot(d, u)
    q = (d[0] - a * u[0], d[1] - a * u[1], d[2] - a * u[2])
    return math.atan2(dot(q, r), dot(q, f))


@_jit
def channel_index(d, basis, ipar, fpar, phi_star, n):
    u = row(basis[n], 2)
    gamma = ipar[n, 0]
    phi = elevation_of(d, u)
    j = round_clamp((phi - fpar[n, 2]) / fpar[n, 3], gamma)
    if ipar[n, 5] != 0:
        j = argmin3(phi, j, phi_star[n], gamma)
    return j


@_jit
def ray_index(d, basis, ipar, fpar, theta_star, n):
    f = row(basis[n], 0)
    r = row(basis[n], 1)
    u = row(basis[n], 2)
    chi = ipar[n, 1]
    theta = azimuth_of(d, f, r, u)
    i = round_clamp((theta - fpar[n, 0]) / fpar[n, 1], chi)
    if ipar[n, 4] != 0:
        i = argmin3(theta, i, theta_star[n], chi)
    return i


@_jit
def moller_trumbore(o, d, v0, e1, e2, guard):
    p = cross(d, e2)
    det = dot(e1, p)
    if abs(det) <= guard:
        return -1.0
    inv = 1.0 / det
    s = sub(o, v0)
    uu = dot(s, p) * inv
    if uu < 0.0 or uu > 1.0:
        return -1.0
    q = cross(s, e1)
    vv = dot(d, q) * inv
    if vv < 0.0 or uu + vv > 1.0:
        return -1.0
    t = dot(e2, q) * inv
    if t < 0.0:
        return -1.0
    return t


@_jit
def mt_guard(e1, e2):
    return MT_COS_GUARD * norm(cross(e1, e2))


@_jit
def closest_point_distance(p, a, b, c):
    ab = sub(b, a)
    ac = sub(c, a)
    ap = sub(p, a)
    d1 = dot(ab, ap)
    d2 = dot(ac, ap)
    if d1 <= 0.0 and d2 <= 0.0:
        return norm(ap)
    bp = sub(p, b)
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)
    if d3 >= 0.0 and d4 <= d3:
        return norm(bp)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return norm(sub(p, add(a, scale(ab, v))))
    cp = sub(p, c)
    d5 = dot(ab, cp)
    d6 = dot(ac, cp)
    if d6 >= 0.0 and d5 <= d6:
        return norm(cp)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return norm(sub(p, add(a, scale(ac, w))))
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return norm(sub(p, add(b, scale(sub(c, b), w))))
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return norm(sub(p, add(a, add(scale(ab, v), scale(ac, w)))))


@_jit
def facing_normal(a, b, c, o, facing):
    """Unit normal oriented so a kept triangle has (c - o) . n > 0.

    Returns (n, s, area) with s = (centroid - o) . n.
    """
    e1 = sub(b, a)
    e2 = sub(c, a)
    cr = cross(e1, e2)
    ln = norm(cr)
    area = 0.5 * ln
    if ln == 0.0:
        return (0.0, 0.0, 0.0), 0.0, 0.0
    nrm = scale(cr, 1.0 / ln)
    cen = ((a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0)
    s = dot(sub(cen, o), nrm)
    if facing == FACING_FRONT:
        nrm = scale(nrm, -1.0)
        s = -s
    elif facing == FACING_BOTH and s < 0.0:
        nrm = scale(nrm, -1.0)
        s = -s
    return nrm, s, area


@_jit
def facing_ok(a, b, c, o, facing):
    _, s, _ = facing_normal(a, b, c, o, facing)
    return s >= EPS_GUARD


# ---------------------------------------------------------------------------
# GACP-T


@_jit
def edge_roots(w, e, u, sphi, s2):
    """Valid cone crossings on one edge: (count, lam0, lam1) sorted."""
    wa = dot(w, u)
    ea = dot(e, u)
    ee = dot(e, e)
    c2 = ea * ea - s2 * ee
    c1 = 2.0 * (ea * wa - s2 * dot(w, e))
    c0 = wa * wa - s2 * dot(w, w)
    r0 = -1.0
    r1 = -1.0
    nr = 0
    if abs(c2) <= C2_LINEAR * ee:
        # edge parallel to a cone generator: the equation is linear
        if c1 != 0.0:
            r0 = -c0 / c1
            nr = 1
    else:
        disc = c1 * c1 - 4.0 * c2 * c0
        if disc < 0.0:
            return 0, -1.0, -1.0
        sq = math.sqrt(disc)
        q = -0.5 * (c1 + sq) if c1 >= 0.0 else -0.5 * (c1 - sq)
        if q == 0.0:
            r0 = 0.0
            nr = 1
        else:
            r0 = q / c2
            r1 = c0 / q
            nr = 2
    count = 0
    l0 = -1.0
    l1 = -1.0
    for k in range(nr):
        lam = r0 if k == 0 else r1
        if lam < 0.0 or lam > 1.0:
            continue
        ax = wa + lam * ea
        if sphi > 0.0 and ax < 0.0:
            continue
        if sphi < 0.0 and ax > 0.0:
            continue
        if count == 0:
            l0 = lam
            count = 1
        elif lam != l0:
            if lam < l0:
                l1 = l0
                l0 = lam
            else:
                l1 = lam
            count = 2
    return count, l0, l1


@_jit
def classify_vertices(a, b, c, o, u, sphi):
    """0: wrong half-space, 1: all inside, 2: mixed, 3: all outside."""
    wa0 = dot(sub(a, o), u)
    wa1 = dot(sub(b, o), u)
    wa2 = dot(sub(c, o), u)
    if sphi > 0.0:
        if wa0 < 0.0 and wa1 < 0.0 and wa2 < 0.0:
            return 0
    else:
        if wa0 > 0.0 and wa1 > 0.0 and wa2 > 0.0:
            return 0
    r0 = norm(sub(a, o))
    r1 = norm(sub(b, o))
    r2 = norm(sub(c, o))
    if sphi > 0.0:
        i0 = wa0 >= sphi * r0
        i1 = wa1 >= sphi * r1
        i2 = wa2 >= sphi * r2
    else:
        i0 = wa0 <= sphi * r0
        i1 = wa1 <= sphi * r1
        i2 = wa2 <= sphi * r2
    n_in = int(i0) + int(i1) + int(i2)
    if n_in == 3:
        return 1
    if n_in > 0:
        return 2
    return 3


@_jit
def gacp_bool(a, b, c, o, u, phi, apex_pos, apex_neg, dmin, dmax):
    if abs(phi) < PLANE_PHI:
        h0 = dot(sub(a, o), u)
        h1 = dot(sub(b, o), u)
        h2 = dot(sub(c, o), u)
        if h0 > 0.0 and h1 > 0.0 and h2 > 0.0:
            return False
        if h0 < 0.0 and h1 < 0.0 and h2 < 0.0:
            return False
        return True
    sphi = math.sin(phi)
    if math.cos(phi) < POLAR_COS:
        # the cone has collapsed onto the apex ray
        apex = apex_pos if sphi > 0.0 else apex_neg
        return apex and dmin <= dmax
    case = classify_vertices(a, b, c, o, u, sphi)
    if case <= 1:
        return False
    if case == 2:
        return True
    apex = apex_pos if sphi > 0.0 else apex_neg
    if apex and dmin <= dmax * abs(sphi):
        return True
    s2 = sphi * sphi
    for k in range(3):
        if k == 0:
            p0, p1 = a, b
        elif k == 1:
            p0, p1 = b, c
        else:
            p0, p1 = c, a
        cnt, _, _ = edge_roots(sub(p0, o), sub(p1, p0), u, sphi, s2)
        if cnt > 0:
            return True
    return False


@_jit
def _push_point(pts, n, p):
    for k in range(n):
        dx = pts[k, 0] - p[0]
        dy = pts[k, 1] - p[1]
        dz = pts[k, 2] - p[2]
        if math.sqrt(dx * dx + dy * dy + dz * dz) <= DEDUP_DIST:
            return n
    if n < pts.shape[0]:
        pts[n, 0] = p[0]
        pts[n, 1] = p[1]
        pts[n, 2] = p[2]
    return n + 1


@_jit
def gacp_full(a, b, c, o, u, phi, apex_pos, apex_neg, dmin, dmax, pts):
    """Fill ``pts`` with crossing points; return (count, apex_hit).

    ``count`` above two means the degenerate multi-arc case; only the first
    ``pts.shape[0]`` points are stored.
    """
    n = 0
    if abs(phi) < PLANE_PHI:
        for k in range(3):
            if k == 0:
                p0, p1 = a, b
            elif k == 1:
                p0, p1 = b, c
            else:
                p0, p1 = c, a
            h0 = dot(sub(p0, o), u)
            h1 = dot(sub(p1, o), u)
            if h0 == 0.0:
                n = _push_point(pts, n, p0)
            elif (h0 < 0.0 < h1) or (h1 < 0.0 < h0):
                lam = h0 / (h0 - h1)
                n = _push_point(pts, n, add(p0, scale(sub(p1, p0), lam)))
        return n, False
    sphi = math.sin(phi)
    if math.cos(phi) < POLAR_COS:
        apex = apex_pos if sphi > 0.0 else apex_neg
        return 0, apex and dmin <= dmax
    case = classify_vertices(a, b, c, o, u, sphi)
    if case <= 1:
        return 0, False
    apex_hit = False
    if case == 3:
        apex = apex_pos if sphi > 0.0 else apex_neg
        apex_hit = apex and dmin <= dmax * abs(sphi)
    s2 = sphi * sphi
    for k in range(3):
        if k == 0:
            p0, p1 = a, b
        elif k == 1:
            p0, p1 = b, c
        else:
            p0, p1 = c, a
        e = sub(p1, p0)
        cnt, l0, l1 = edge_roots(sub(p0, o), e, u, sphi, s2)
        if cnt >= 1:
            n = _push_point(pts, n, add(p0, scale(e, l0)))
        if cnt == 2:
            n = _push_point(pts, n, add(p0, scale(e, l1)))
    return n, apex_hit


@_jit
def apex_hits(a, b, c, o, u):
    e1 = sub(b, a)
    e2 = sub(c, a)
    g = mt_guard(e1, e2)
    pos = moller_trumbore(o, u, a, e1, e2, g) >= 0.0
    neg = moller_trumbore(o, scale(u, -1.0), a, e1, e2, g) >= 0.0
    return pos, neg


# ---------------------------------------------------------------------------
# early-pass building blocks


@_jit
def max_vertex_distance(p, a, b, c):
    return max(norm(sub(a, p)), max(norm(sub(b, p)), norm(sub(c, p))))


@_jit
def origin_filters(a, b, c, o, facing, eps_a, d_min, d_max, near_rule):
    """Return (outcome, delta_min).

    near_rule NEAR_CLOSEST rejects when the closest point is inside the
    blind zone; NEAR_FARTHEST only when the whole triangle is.
    """
    nrm, s, area = facing_normal(a, b, c, o, facing)
    if s < EPS_GUARD:
        return REJECT_BACKFACE, -1.0
    cen = ((a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0)
    dc = sub(cen, o)
    l2 = dot(dc, dc)
    if l2 < EPS_GUARD:
        l2 = EPS_GUARD
    lhs = area * s
    if lhs * lhs < eps_a * eps_a * l2 * l2 * l2:
        return REJECT_AREA, -1.0
    dm = closest_point_distance(o, a, b, c)
    if dm > d_max:
        return REJECT_RANGE, dm
    if dm < d_min:
        if near_rule == NEAR_CLOSEST or max_vertex_distance(o, a, b, c) < d_min:
            return REJECT_RANGE, dm
    return PASS, dm


@_jit
def channel_phi(ipar, fpar, phi_star, n, j):
    """Elevation the rays of channel j are actually cast at."""
    if ipar[n, 5] != 0:
        return phi_star[n, j]
    return fpar[n, 2] + j * fpar[n, 3]


@_jit
def channel_span(a, b, c, org, basis, ipar, fpar, phi_star, n, apex_pos, apex_neg, dmin):
    """Bracket [C_from, C_to] with galloping + two binary searches.

    Returns (c_from, c_to, probes); c_from == -1 when nothing intersects.
    """
    o = row(org, n)
    u = row(basis[n], 2)
    gamma = ipar[n, 0]
    dmax = fpar[n, 5]
    k0 = channel_index(sub(a, o), basis, ipar, fpar, phi_star, n)
    k1 = channel_index(sub(b, o), basis, ipar, fpar, phi_star, n)
    k2 = channel_index(sub(c, o), basis, ipar, fpar, phi_star, n)
    kmax = max(k0, max(k1, k2))
    kmin = min(k0, min(k1, k2))
    cmid = (kmax + kmin + 1) // 2
    probes = 1
    if not gacp_bool(a, b, c, o, u, channel_phi(ipar, fpar, phi_star, n, cmid), apex_pos, apex_neg, dmin, dmax):
        found = -1
        step = 1
        while step < gamma and found < 0:
            up = cmid + step
            if up < gamma:
                probes += 1
                if gacp_bool(a, b, c, o, u, channel_phi(ipar, fpar, phi_star, n, up), apex_pos, apex_neg, dmin, dmax):
                    found = up
                    break
            dn = cmid - step
            if dn >= 0:
                probes += 1
                if gacp_bool(a, b, c, o, u, channel_phi(ipar, fpar, phi_star, n, dn), apex_pos, apex_neg, dmin, dmax):
                    found = dn
                    break
            step *= 2
        if found < 0:
            return -1, -1, probes
        cmid = found
    lo = 0
    hi = cmid
    while lo < hi:
        mid = (lo + hi) // 2
        probes += 1
        if gacp_bool(a, b, c, o, u, channel_phi(ipar, fpar, phi_star, n, mid), apex_pos, apex_neg, dmin, dmax):
            hi = mid
        else:
            lo = mid + 1
    c_from = hi
    lo = cmid
    hi = gamma - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        probes += 1
        if gacp_bool(a, b, c, o, u, channel_phi(ipar, fpar, phi_star, n, mid), apex_pos, apex_neg, dmin, dmax):
            lo = mid
        else:
            hi = mid - 1
    c_to = lo
    if ipar[n, 5] != 0:
        c_from = max(c_from - 1, 0)
        c_to = min(c_to + 1, gamma - 1)
    return c_from, c_to, probes


@_jit
def all_cw_geometric(a, b, c, o, f, r):
    da = sub(a, o)
    db = sub(b, o)
    dc = sub(c, o)
    if dot(da, f) > 0.0 and dot(db, f) > 0.0 and dot(dc, f) > 0.0:
        return True
    ra = dot(da, r)
    rb = dot(db, r)
    rc = dot(dc, r)
    if ra > 0.0 and rb > 0.0 and rc > 0.0:
        return True
    if ra < 0.0 and rb < 0.0 and rc < 0.0:
        return True
    return False


@_jit
def widen_span(r_from, count, chi, full_az):
    """One extra ray on each side (noise margin)."""
    if count >= chi:
        return 0, chi
    if full_az:
        count += 2
        if count >= chi:
            return 0, chi
        return (r_from - 1) % chi, count
    r_to = min(r_from + count, chi - 1)
    r_from = max(r_from - 1, 0)
    return r_from, r_to - r_from + 1


@_jit
def ray_span_fast(a, b, c, org, basis, ipar, fpar, theta_star, n):
    """Return (all_cw_for_classification, all_cw_geometric, r_from, count).

    count == 0 means no span (seam straddle).
    """
    o = row(org, n)
    f = row(basis[n], 0)
    r = row(basis[n], 1)
    chi = ipar[n, 1]
    full_az = ipar[n, 3] != 0
    geom = all_cw_geometric(a, b, c, o, f, r)
    if full_az and not geom:
        return False, False, 0, 0
    if not geom:
        # narrow FOV: no seam inside the grid, but the triangle may wrap the axis
        return True, False, 0, chi
    i0 = ray_index(sub(a, o), basis, ipar, fpar, theta_star, n)
    i1 = ray_index(sub(b, o), basis, ipar, fpar, theta_star, n)
    i2 = ray_index(sub(c, o), basis, ipar, fpar, theta_star, n)
    lo = min(i0, min(i1, i2))
    hi = max(i0, max(i1, i2))
    r_from = lo
    count = hi - lo + 1
    if ipar[n, 4] != 0:
        r_from, count = widen_span(r_from, count, chi, full_az)
    return True, True, r_from, count


@_jit
def span_rtic(buf, dirs, o, a, e1, e2, guard, c_from, c_to, r_from, count, chi, offset, d_min, d_max):
    tests = 0
    for j in range(c_from, c_to + 1):
        base = j * chi + offset
        for i in range(count):
            g = base + (r_from + i) % chi
            d = ray_at(dirs, g)
            t = moller_trumbore(o, d, a, e1, e2, guard)
            tests += 1
            if t >= d_min and t <= d_max:
                record(buf, g, t)
    return tests


# ---------------------------------------------------------------------------
# passes


@_jit
def early_pass(tris, t_lo, t_hi, org, basis, ipar, fpar, theta_star, phi_star, dirs,
               gamma_t, chi_t, eps_a, facing, near_rule, buf,
               d_cfrom, d_cto, d_dmin, d_flags, bat_any, counts):
    n_orig = org.shape[0]
    for k in range(t_lo, t_hi):
        a, b, c = tri_vertices(tris, k)
        e1 = sub(b, a)
        e2 = sub(c, a)
        guard = mt_guard(e1, e2)
        for n in range(n_orig):
            o = row(org, n)
            d_min = fpar[n, 4]
            d_max = fpar[n, 5]
            outcome, dm = origin_filters(a, b, c, o, facing, eps_a, d_min, d_max, near_rule)
            if outcome != PASS:
                counts[outcome - 1] += 1
                continue
            u = row(basis[n], 2)
            ap, an = apex_hits(a, b, c, o, u)
            counts[C_AUX] += 2
            c_from, c_to, _ = channel_span(a, b, c, org, basis, ipar, fpar, phi_star, n, ap, an, dm)
            if c_from < 0:
                counts[C_NOCHANNEL] += 1
                continue
            cls_cw, geom_cw, r_from, count = ray_span_fast(a, b, c, org, basis, ipar, fpar, theta_star, n)
            chi = ipar[n, 1]
            if cls_cw and (c_to - c_from + 1) <= gamma_t and count <= chi_t:
                counts[C_SAT] += 1
                counts[C_RTIC] += span_rtic(buf, dirs, o, a, e1, e2, guard, c_from, c_to,
                                            r_from, count, chi, ipar[n, 2], d_min, d_max)
            else:
                counts[C_BAT] += 1
                bat_any[k] = True
                d_cfrom[k, n] = c_from
                d_cto[k, n] = c_to
                d_dmin[k, n] = dm
                fl = FLAG_ACTIVE
                if ap:
                    fl |= FLAG_APEX_POS
                if an:
                    fl |= FLAG_APEX_NEG
                if geom_cw:
                    fl |= FLAG_ALL_CW
                d_flags[k, n] = fl


@_jit
def disambiguate(a, b, c, o, u, facing, dirs, g_mid, eps_face):
    """True if the CW arc is the one crossing the triangle."""
    nrm, s, _ = facing_normal(a, b, c, o, facing)
    d = ray_at(dirs, g_mid)
    ad = dot(d, u)
    dccw = (2.0 * ad * u[0] - d[0], 2.0 * ad * u[1] - d[1], 2.0 * ad * u[2] - d[2])
    nd = dot(nrm, d)
    hit_cw = nd >= eps_face and s / nd >= 0.0
    nd2 = dot(nrm, dccw)
    hit_ccw = nd2 >= eps_face and s / nd2 >= 0.0
    if hit_cw and not hit_ccw:
        return True, False
    if hit_ccw and not hit_cw:
        return False, False
    e1 = sub(b, a)
    e2 = sub(c, a)
    return moller_trumbore(o, d, a, e1, e2, mt_guard(e1, e2)) >= 0.0, True


@_jit
def resolve_channel(a, b, c, org, basis, ipar, fpar, theta_star, phi_star, n, j, flags, dmin, pts):
    """Per-channel exact span: (status, r_from, count, lo, hi).

    status 0 skip, 1 tangent, 2 two crossings (arc not yet disambiguated),
    3 full span.  For status 2, lo/hi are the CW endpoints.
    """
    o = row(org, n)
    u = row(basis[n], 2)
    chi = ipar[n, 1]
    phi = channel_phi(ipar, fpar, phi_star, n, j)
    ncross, apex = gacp_full(a, b, c, o, u, phi, (flags & FLAG_APEX_POS) != 0,
                             (flags & FLAG_APEX_NEG) != 0, dmin, fpar[n, 5], pts)
    if apex or ncross > 2:
        return 3, 0, chi, 0, chi - 1
    if ncross == 0:
        return 0, 0, 0, 0, 0
    p0 = (pts[0, 0], pts[0, 1], pts[0, 2])
    i0 = ray_index(sub(p0, o), basis, ipar, fpar, theta_star, n)
    if ncross == 1:
        return 1, i0, 1, i0, i0
    p1 = (pts[1, 0], pts[1, 1], pts[1, 2])
    i1 = ray_index(sub(p1, o), basis, ipar, fpar, theta_star, n)
    lo = min(i0, i1)
    hi = max(i0, i1)
    return 2, lo, hi - lo + 1, lo, hi


@_jit
def late_pass(tris, entries, e_lo, e_hi, org, basis, ipar, fpar, theta_star, phi_star, dirs,
              eps_face, facing, buf, d_cfrom, d_cto, d_dmin, d_flags, counts):
    n_orig = org.shape[0]
    pts = np.empty((4, 3))
    for q in range(e_lo, e_hi):
        k = entries[q]
        a, b, c = tri_vertices(tris, k)
        e1 = sub(b, a)
        e2 = sub(c, a)
        guard = mt_guard(e1, e2)
        for n in range(n_orig):
            flags = d_flags[q, n]
            if (flags & FLAG_ACTIVE) == 0:
                continue
            o = row(org, n)
            u = row(basis[n], 2)
            chi = ipar[n, 1]
            offset = ipar[n, 2]
            full_az = ipar[n, 3] != 0
            d_min = fpar[n, 4]
            d_max = fpar[n, 5]
            dm = np.float64(d_dmin[q, n])
            for j in range(d_cfrom[q, n], d_cto[q, n] + 1):
                status, r_from, count, lo, hi = resolve_channel(
                    a, b, c, org, basis, ipar, fpar, theta_star, phi_star, n, j, flags, dm, pts)
                if status == 0:
                    continue
                if status == 2 and (flags & FLAG_ALL_CW) == 0:
                    g_mid = j * chi + (lo + (hi - lo + 1) // 2) % chi + offset
                    cw, used_mt = disambiguate(a, b, c, o, u, facing, dirs, g_mid, eps_face)
                    if used_mt:
                        counts[C_AUX] += 1
                    if not cw:
                        r_from = hi
                        count = chi if lo == hi else (lo - hi) % chi + 1
                if ipar[n, 4] != 0:
                    r_from, count = widen_span(r_from, count, chi, full_az)
                counts[C_RTIC] += span_rtic(buf, dirs, o, a, e1, e2, guard, j, j,
                                            r_from, count, chi, offset, d_min, d_max)


# ---------------------------------------------------------------------------
# reference casters


@_jit
def facing_mask(tris, o, facing):
    m = np.zeros(tris.shape[0], dtype=np.bool_)
    for k in range(tris.shape[0]):
        a, b, c = tri_vertices(tris, k)
        m[k] = facing_ok(a, b, c, o, facing)
    return m


@_jit
def brute_force(tris, facing_idx, o, dirs, g_lo, g_hi, d_min, d_max, buf):
    nf = facing_idx.shape[0]
    v0 = np.empty((nf, 3))
    e1 = np.empty((nf, 3))
    e2 = np.empty((nf, 3))
    gd = np.empty(nf)
    for q in range(nf):
        a, b, c = tri_vertices(tris, facing_idx[q])
        x1 = sub(b, a)
        x2 = sub(c, a)
        for m in range(3):
            v0[q, m] = a[m]
            e1[q, m] = x1[m]
            e2[q, m] = x2[m]
        gd[q] = mt_guard(x1, x2)
    tests = 0
    for g in range(g_lo, g_hi):
        d = ray_at(dirs, g)
        best = np.inf
        for q in range(nf):
            t = moller_trumbore(o, d, row(v0, q), row(e1, q), row(e2, q), gd[q])
            if t >= d_min and t <= d_max and t < best:
                best = t
        tests += nf
        if best < np.inf:
            record(buf, g, best)
    return tests
