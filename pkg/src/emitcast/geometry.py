"""Vector math for the emitter-centric caster.

Frames, triangles and the closed-form queries the pipeline is built from:
ray directions from (azimuth, elevation), nearest channel/ray indices of a
world point, Moller-Trumbore, point-triangle distance and the channel-surface
(cone or plane) vs triangle test.

Stored geometry is float32; every query evaluates in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

DEGENERATE_AREA = 1e-12


class DegenerateTriangleError(ValueError):
    pass


def _vec(a) -> tuple[float, float, float]:
    a = np.asarray(a, dtype=np.float64)
    return (float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True, eq=False)
class OrientedFrame:
    """Orthonormal sensor basis; ``forward x right == up``."""

    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray

    def __post_init__(self):
        f, r, u = (np.asarray(v, dtype=np.float64) for v in (self.forward, self.right, self.up))
        for name, v in (("forward", f), ("right", r), ("up", u)):
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite 3-vector")
            if abs(np.linalg.norm(v) - 1.0) > 1e-6:
                raise ValueError(f"{name} is not unit length")
        if max(abs(f @ r), abs(f @ u), abs(r @ u)) > 1e-6:
            raise ValueError("frame axes are not orthogonal")
        if np.linalg.norm(np.cross(f, r) - u) > 1e-5:
            raise ValueError("frame handedness: expected forward x right == up")
        object.__setattr__(self, "forward", f)
        object.__setattr__(self, "right", r)
        object.__setattr__(self, "up", u)

    @classmethod
    def identity(cls) -> OrientedFrame:
        return cls(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0]))

    @classmethod
    def from_forward_up(cls, forward, up) -> OrientedFrame:
        f = np.asarray(forward, dtype=np.float64)
        f = f / np.linalg.norm(f)
        u = np.asarray(up, dtype=np.float64)
        u = u - (u @ f) * f
        n = np.linalg.norm(u)
        if n < 1e-9:
            raise ValueError("up is parallel to forward")
        u = u / n
        return cls(f, np.cross(u, f), u)

    def as_matrix(self) -> np.ndarray:
        """Rows forward, right, up."""
        return np.stack([self.forward, self.right, self.up])


@dataclass(frozen=True, eq=False)
class Triangle:
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        for name in ("v0", "v1", "v2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float32).reshape(3))
        if triangle_area(self.array) < DEGENERATE_AREA:
            raise DegenerateTriangleError("triangle area below degenerate threshold")

    @property
    def array(self) -> np.ndarray:
        return np.stack([self.v0, self.v1, self.v2])

    def __array__(self, dtype=None, copy=None):
        a = self.array
        return a if dtype is None else a.astype(dtype)


@dataclass(frozen=True)
class TriangleDerived:
    centroid: np.ndarray
    normal: np.ndarray
    area: float


@dataclass(frozen=True)
class GacpCrossing:
    """Result of the full channel-surface vs triangle test.

    ``count`` is the number of distinct crossing points found.  When
    ``full_span`` is set (more than two crossings) ``points`` is empty.
    """

    count: int
    points: tuple = field(default=())
    apex_hit: bool = False
    full_span: bool = False


def _tri64(tri) -> tuple:
    t = np.asarray(tri, dtype=np.float32).reshape(3, 3).astype(np.float64)
    return tuple(_vec(t[k]) for k in range(3))


def triangle_area(tri) -> float:
    t = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    return 0.5 * float(np.linalg.norm(np.cross(t[1] - t[0], t[2] - t[0])))


def derive(tri) -> TriangleDerived:
    t = np.asarray(tri, dtype=np.float32).reshape(3, 3).astype(np.float64)
    cr = np.cross(t[1] - t[0], t[2] - t[0])
    ln = np.linalg.norm(cr)
    if 0.5 * ln < DEGENERATE_AREA:
        raise DegenerateTriangleError("triangle area below degenerate threshold")
    return TriangleDerived(centroid=t.mean(axis=0), normal=cr / ln, area=0.5 * float(ln))


def ray_direction(theta: float, phi: float, frame: OrientedFrame) -> np.ndarray:
    d = K.ray_direction(float(theta), float(phi), _vec(frame.forward), _vec(frame.right), _vec(frame.up))
    return np.array(d)


def channel_index_of_point(p, o, frame: OrientedFrame, phi0: float, dphi: float, gamma_n: int) -> int:
    d = np.asarray(p, dtype=np.float64) - np.asarray(o, dtype=np.float64)
    if not np.any(d):
        raise ValueError("degenerate direction: point coincides with origin")
    phi = K.elevation_of(_vec(d), _vec(frame.up))
    return K.round_clamp((phi - phi0) / dphi, int(gamma_n))


def ray_index_of_point(p, o, frame: OrientedFrame, theta0: float, dtheta: float, chi_n: int) -> int:
    d = np.asarray(p, dtype=np.float64) - np.asarray(o, dtype=np.float64)
    q = d - (d @ frame.up) * frame.up
    if np.linalg.norm(q) <= 1e-12 * max(np.linalg.norm(d), 1e-300):
        raise ValueError("point lies on spin axis; azimuth undefined")
    theta = K.azimuth_of(_vec(d), _vec(frame.forward), _vec(frame.right), _vec(frame.up))
    return K.round_clamp((theta - theta0) / dtheta, int(chi_n))


def moller_trumbore(origin, direction, tri) -> float | None:
    a, b, c = _tri64(tri)
    e1 = K.sub(b, a)
    e2 = K.sub(c, a)
    t = K.moller_trumbore(_vec(origin), _vec(direction), a, e1, e2, K.mt_guard(e1, e2))
    return None if t < 0.0 else t


def closest_point_distance(o, tri) -> float:
    a, b, c = _tri64(tri)
    return K.closest_point_distance(_vec(o), a, b, c)


def apex_ray_hits(tri, o, up) -> tuple[bool, bool]:
    """Whether the rays along +up and -up from ``o`` hit the triangle."""
    a, b, c = _tri64(tri)
    return K.apex_hits(a, b, c, _vec(o), _vec(up))


def gacp_t_full(tri, o, up, phi: float, delta_min: float, d_max: float, apex=None) -> GacpCrossing:
    """Crossings of the elevation-``phi`` channel surface with a triangle.

    ``apex`` optionally supplies precomputed (hit along +up, hit along -up).
    """
    a, b, c = _tri64(tri)
    o = _vec(o)
    u = _vec(up)
    if apex is None:
        apex = K.apex_hits(a, b, c, o, u)
    pts = np.empty((8, 3))
    n, apex_hit = K.gacp_full(a, b, c, o, u, float(phi), bool(apex[0]), bool(apex[1]),
                              float(delta_min), float(d_max), pts)
    if n > 2:
        return GacpCrossing(count=n, points=(), apex_hit=apex_hit, full_span=True)
    return GacpCrossing(count=n, points=tuple(pts[k].copy() for k in range(n)), apex_hit=apex_hit)


def gacp_t_bool(tri, o, up, phi: float, delta_min: float, d_max: float, apex=None) -> bool:
    a, b, c = _tri64(tri)
    o = _vec(o)
    u = _vec(up)
    if apex is None:
        apex = K.apex_hits(a, b, c, o, u)
    return bool(K.gacp_bool(a, b, c, o, u, float(phi), bool(apex[0]), bool(apex[1]),
                            float(delta_min), float(d_max)))
