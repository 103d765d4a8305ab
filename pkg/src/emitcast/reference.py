"""Ground-truth casters and the hit-buffer comparator.

``brute_force_cast`` tests every ray against every visible triangle.
``bvh_cast`` walks a median-split box tree built per call; it prunes only
boxes a ray provably cannot reach before its current best hit, so its
output is bit-identical to the brute-force buffer.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import _kernels as K
from .sensor import ENCODED_INF, HitBuffer, SensorRig

LEAF_SIZE = 8
BOX_PAD = 1e-6

_FACING = {"front": K.FACING_FRONT, "back": K.FACING_BACK, "both": K.FACING_BOTH}


def _as_tris(scene) -> np.ndarray:
    from .pipeline import as_triangles

    return as_triangles(scene)


def _ray_parts(rig: SensorRig, threads: int):
    """(origin index, g_lo, g_hi) chunks over each origin's rays."""
    out = []
    chunks = 1 if threads <= 1 else threads * 4
    for n, c in enumerate(rig):
        edges = np.linspace(c.ray_offset, c.ray_offset + c.ray_count, chunks + 1).astype(np.int64)
        out += [(n, int(edges[p]), int(edges[p + 1])) for p in range(chunks) if edges[p + 1] > edges[p]]
    return out


def _map(fn, parts, threads):
    if threads <= 1 or len(parts) <= 1:
        return [fn(*p) for p in parts]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda p: fn(*p), parts))


def brute_force_cast(scene, sensors, facing: str = "front", threads: int = 1,
                     return_tests: bool = False):
    """Nearest hit per ray over all triangles, gated to [d_min, d_max]."""
    tris = _as_tris(scene)
    rig = SensorRig.coerce(sensors)
    dirs = rig.directions
    buffer = HitBuffer(rig.ray_count)
    masks = [K.facing_mask(tris, tuple(float(x) for x in c.origin), _FACING[facing]) for c in rig]
    idx = [np.flatnonzero(m).astype(np.int64) for m in masks]

    def work(n, lo, hi):
        c = rig[n]
        buf = np.full(rig.ray_count, ENCODED_INF, dtype=np.uint32)
        t = K.brute_force(tris, idx[n], tuple(float(x) for x in c.origin), dirs, lo, hi,
                          float(c.d_min), float(c.d_max), buf)
        return buf, t

    tests = 0
    for buf, t in _map(work, _ray_parts(rig, threads), threads):
        buffer.merge(buf)
        tests += t
    return (buffer, tests) if return_tests else buffer


# ---------------------------------------------------------------------------
# BVH


@dataclass(frozen=True, eq=False)
class ReferenceBvh:
    """Flattened box tree.

    Node ``i`` is a leaf when ``count[i] > 0``; it then owns primitives
    ``order[first[i] : first[i] + count[i]]``.  Internal nodes keep their
    two children at ``first[i]`` and ``first[i] + 1``.
    """

    lo: np.ndarray
    hi: np.ndarray
    first: np.ndarray
    count: np.ndarray
    order: np.ndarray
    triangles: np.ndarray

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.first.shape[0])


@njit(cache=True, nogil=True)
def _build(tris, leaf_size, pad):
    n = tris.shape[0]
    tmin = np.empty((n, 3))
    tmax = np.empty((n, 3))
    cen = np.empty((n, 3))
    for k in range(n):
        for a in range(3):
            x0 = np.float64(tris[k, 0, a])
            x1 = np.float64(tris[k, 1, a])
            x2 = np.float64(tris[k, 2, a])
            tmin[k, a] = min(x0, min(x1, x2))
            tmax[k, a] = max(x0, max(x1, x2))
            cen[k, a] = (x0 + x1 + x2) / 3.0
    cap = max(1, 2 * n)
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    first = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    order = np.arange(n)
    start = np.zeros(cap, dtype=np.int64)
    size = np.zeros(cap, dtype=np.int64)
    size[0] = n
    n_nodes = 1
    # one pad per axis, sized from the root box, keeps every child inside its parent
    ext = np.empty(3)
    for a in range(3):
        ext[a] = pad * (np.max(np.abs(tmin[:, a])) + np.max(np.abs(tmax[:, a])) + 1.0)
    stack = np.empty(cap, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        i = stack[sp]
        s0 = start[i]
        m = size[i]
        for a in range(3):
            bl = np.inf
            bh = -np.inf
            for q in range(s0, s0 + m):
                k = order[q]
                bl = min(bl, tmin[k, a])
                bh = max(bh, tmax[k, a])
            lo[i, a] = bl - ext[a]
            hi[i, a] = bh + ext[a]
        if m <= leaf_size:
            first[i] = s0
            count[i] = m
            continue
        axis = 0
        best = -1.0
        for a in range(3):
            cl = np.inf
            ch = -np.inf
            for q in range(s0, s0 + m):
                cl = min(cl, cen[order[q], a])
                ch = max(ch, cen[order[q], a])
            if ch - cl > best:
                best = ch - cl
                axis = a
        keys = np.empty(m)
        for q in range(m):
            keys[q] = cen[order[s0 + q], axis]
        perm = np.argsort(keys, kind="mergesort")
        seg = order[s0:s0 + m].copy()
        for q in range(m):
            order[s0 + q] = seg[perm[q]]
        half = m // 2
        left = n_nodes
        n_nodes += 2
        first[i] = left
        count[i] = 0
        start[left] = s0
        size[left] = half
        start[left + 1] = s0 + half
        size[left + 1] = m - half
        stack[sp] = left + 1
        sp += 1
        stack[sp] = left
        sp += 1
    return lo[:n_nodes].copy(), hi[:n_nodes].copy(), first[:n_nodes].copy(), count[:n_nodes].copy(), order


def build_reference_bvh(triangles, leaf_size: int = LEAF_SIZE) -> ReferenceBvh:
    tris = _as_tris(triangles)
    if tris.shape[0] == 0:
        z = np.zeros((0, 3))
        e = np.zeros(0, dtype=np.int64)
        return ReferenceBvh(z, z, e, e, e, tris)
    lo, hi, first, count, order = _build(tris, int(leaf_size), BOX_PAD)
    return ReferenceBvh(lo, hi, first, count, order, tris)


@njit(cache=True, nogil=True)
def _slab(lo, hi, i, o, d, t_max):
    """Entry distance of the ray into box ``i`` or -1 if it misses."""
    t0 = 0.0
    t1 = t_max
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if o[a] < lo[i, a] or o[a] > hi[i, a]:
                return -1.0
            continue
        inv = 1.0 / d[a]
        ta = (lo[i, a] - o[a]) * inv
        tb = (hi[i, a] - o[a]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return -1.0
    return t0


@njit(cache=True, nogil=True)
def _bvh_rays(lo, hi, first, count, order, tris, visible, o, dirs, g_lo, g_hi, d_min, d_max, buf):
    stack = np.empty(128, dtype=np.int64)
    tests = 0
    for g in range(g_lo, g_hi):
        d = K.ray_at(dirs, g)
        best = np.inf
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            i = stack[sp]
            reach = d_max if best == np.inf else best
            t_in = _slab(lo, hi, i, o, d, reach * (1.0 + 1e-9) + 1e-9)
            if t_in < 0.0:
                continue
            if count[i] == 0:
                stack[sp] = first[i]
                sp += 1
                stack[sp] = first[i] + 1
                sp += 1
                continue
            for q in range(first[i], first[i] + count[i]):
                k = order[q]
                if not visible[k]:
                    continue
                a, b, c = K.tri_vertices(tris, k)
                e1 = K.sub(b, a)
                e2 = K.sub(c, a)
                t = K.moller_trumbore(o, d, a, e1, e2, K.mt_guard(e1, e2))
                tests += 1
                if t >= d_min and t <= d_max and t < best:
                    best = t
        if best < np.inf:
            K.record(buf, g, best)
    return tests


def bvh_cast(bvh: ReferenceBvh, sensors, facing: str = "front", threads: int = 1) -> HitBuffer:
    rig = SensorRig.coerce(sensors)
    buffer = HitBuffer(rig.ray_count)
    if bvh.n_triangles == 0:
        return buffer
    dirs = rig.directions
    vis = [K.facing_mask(bvh.triangles, tuple(float(x) for x in c.origin), _FACING[facing]) for c in rig]

    def work(n, g_lo, g_hi):
        c = rig[n]
        buf = np.full(rig.ray_count, ENCODED_INF, dtype=np.uint32)
        _bvh_rays(bvh.lo, bvh.hi, bvh.first, bvh.count, bvh.order, bvh.triangles, vis[n],
                  tuple(float(x) for x in c.origin), dirs, g_lo, g_hi, float(c.d_min), float(c.d_max), buf)
        return buf

    for buf in _map(work, _ray_parts(rig, threads), threads):
        buffer.merge(buf)
    return buffer


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class MatchReport:
    """Accuracy of ``a`` against reference ``b`` over rays where ``b`` hits."""

    compared: int
    matched: int
    miss_vs_hit: int
    hit_vs_miss: int
    distance_mismatch: int
    tolerance: float

    @property
    def fraction(self) -> float:
        return self.matched / self.compared if self.compared else 1.0

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["fraction"] = self.fraction
        return d


def compare_hit_buffers(a, b, tolerance: float = 1e-3) -> MatchReport:
    """Per-ray comparison; ``b`` is the reference.

    A hit matches when the distances differ by at most ``tolerance`` plus
    one float32 ulp, which keeps the boundary inclusive after rounding.
    """
    va = a.values if isinstance(a, HitBuffer) else np.asarray(a, dtype=np.uint32)
    vb = b.values if isinstance(b, HitBuffer) else np.asarray(b, dtype=np.uint32)
    if va.shape != vb.shape:
        raise ValueError(f"buffer length mismatch: {va.size} vs {vb.size}")
    ha = va != ENCODED_INF
    hb = vb != ENCODED_INF
    da = HitBuffer(values=va).distances().astype(np.float64)
    db = HitBuffer(values=vb).distances().astype(np.float64)
    both = ha & hb
    close = np.zeros_like(both)
    big = np.maximum(da[both], db[both]).astype(np.float32)
    slack = tolerance + np.spacing(big).astype(np.float64)
    close[both] = np.abs(da[both] - db[both]) <= slack
    matched = int(np.count_nonzero(close))
    return MatchReport(
        compared=int(np.count_nonzero(hb)),
        matched=matched,
        miss_vs_hit=int(np.count_nonzero(~ha & hb)),
        hit_vs_miss=int(np.count_nonzero(ha & ~hb)),
        distance_mismatch=int(np.count_nonzero(both) - matched),
        tolerance=float(tolerance),
    )


def brute_force_bound(n_triangles: int, sensors) -> int:
    return int(n_triangles) * SensorRig.coerce(sensors).ray_count


__all__ = ["brute_force_cast", "ReferenceBvh", "build_reference_bvh", "bvh_cast", "MatchReport",
           "compare_hit_buffers", "LEAF_SIZE"]
