"""Two-pass emitter-centric caster.

The early pass runs per (triangle, origin): cheap filters, a channel span
from binary-searched channel-surface probes, a conservative ray span from
the three vertex azimuths, then either inline intersection tests over the
span (small triangles) or deferral (large or seam-straddling ones).  The
late pass resolves each deferred triangle channel by channel with exact
crossing points.

Both passes write through the same min-merge on encoded distances, so the
final buffer does not depend on scheduling.  Work is split into fixed
partitions, each with a private buffer, and merged with ``np.minimum``.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .geometry import _tri64, _vec
from .sensor import ENCODED_INF, HitBuffer, SensorConfig, SensorRig

FACING_MODES = {"front": K.FACING_FRONT, "back": K.FACING_BACK, "both": K.FACING_BOTH}
NEAR_RULES = {"farthest": K.NEAR_FARTHEST, "closest": K.NEAR_CLOSEST}


@dataclass(frozen=True)
class Thresholds:
    """Classification thresholds and numeric knobs.

    ``facing`` selects which side of a triangle is visible: ``front`` keeps
    triangles whose counter-clockwise winding faces the origin, ``back`` the
    opposite, ``both`` disables the back-face filter.

    ``near_rule`` decides when the blind zone culls a triangle: ``closest``
    as soon as its nearest point is closer than ``d_min``, ``farthest``
    (default) only when every vertex is, which keeps hits on the far part
    of a triangle that grazes the sensor.
    """

    gamma_t: int = 64
    chi_t: int = 64
    eps_a: float = 1e-6
    eps_face: float = 1e-4
    facing: str = "front"
    deferred_soft_cap: int = 800_000
    near_rule: str = "farthest"

    def __post_init__(self):
        if self.gamma_t < 1 or self.chi_t < 1:
            raise ValueError("thresholds must be positive")
        if self.eps_a < 0 or self.eps_face < 0:
            raise ValueError("epsilons must be non-negative")
        if self.facing not in FACING_MODES:
            raise ValueError(f"facing must be one of {sorted(FACING_MODES)}")
        if self.near_rule not in NEAR_RULES:
            raise ValueError(f"near_rule must be one of {sorted(NEAR_RULES)}")

    @property
    def facing_code(self) -> int:
        return FACING_MODES[self.facing]

    @property
    def near_code(self) -> int:
        return NEAR_RULES[self.near_rule]


@dataclass(frozen=True)
class SpanRect:
    """Channel x ray window.  The ray range is a clockwise arc mod chi."""

    c_from: int
    c_to: int
    r_from: int
    r_to: int

    @property
    def gamma_span(self) -> int:
        return self.c_to - self.c_from + 1

    def chi_span(self, chi_n: int) -> int:
        return (self.r_to - self.r_from) % chi_n + 1


@dataclass
class RticCounters:
    backface: int = 0
    area: int = 0
    range: int = 0
    no_channel: int = 0
    sat: int = 0
    bat: int = 0
    rtic_performed: int = 0
    aux_tests: int = 0
    brute_force_bound: int = 0

    @classmethod
    def from_array(cls, counts: np.ndarray, bound: int) -> RticCounters:
        c = [int(x) for x in counts]
        return cls(c[K.C_BACKFACE], c[K.C_AREA], c[K.C_RANGE], c[K.C_NOCHANNEL],
                   c[K.C_SAT], c[K.C_BAT], c[K.C_RTIC], c[K.C_AUX], int(bound))

    def to_array(self) -> np.ndarray:
        a = np.zeros(K.N_COUNTERS, dtype=np.int64)
        a[K.C_BACKFACE], a[K.C_AREA], a[K.C_RANGE] = self.backface, self.area, self.range
        a[K.C_NOCHANNEL], a[K.C_SAT], a[K.C_BAT] = self.no_channel, self.sat, self.bat
        a[K.C_RTIC], a[K.C_AUX] = self.rtic_performed, self.aux_tests
        return a

    def add(self, counts: np.ndarray) -> None:
        merged = self.to_array() + counts
        bound = self.brute_force_bound
        self.__dict__.update(RticCounters.from_array(merged, bound).__dict__)

    @property
    def ratio(self) -> float:
        """Performed tests as a fraction of the all-pairs bound."""
        return self.rtic_performed / self.brute_force_bound if self.brute_force_bound else 0.0

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ratio"] = self.ratio
        return d


@dataclass(frozen=True)
class DeferredBatEntry:
    triangle: int
    c_from: np.ndarray  # (origins,)
    c_to: np.ndarray
    delta_min: np.ndarray
    flags: np.ndarray

    def active(self, n: int) -> bool:
        return bool(self.flags[n] & K.FLAG_ACTIVE)

    def apex(self, n: int) -> tuple[bool, bool]:
        return bool(self.flags[n] & K.FLAG_APEX_POS), bool(self.flags[n] & K.FLAG_APEX_NEG)

    def all_cw(self, n: int) -> bool:
        return bool(self.flags[n] & K.FLAG_ALL_CW)


@dataclass
class DeferredList:
    """Structure-of-arrays deferred list; one row per deferred triangle."""

    triangles: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    c_from: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int32))
    c_to: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int32))
    delta_min: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.float32))
    flags: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.uint8))

    def __len__(self) -> int:
        return int(self.triangles.size)

    def __getitem__(self, q: int) -> DeferredBatEntry:
        return DeferredBatEntry(int(self.triangles[q]), self.c_from[q], self.c_to[q],
                                self.delta_min[q], self.flags[q])

    def __iter__(self):
        return (self[q] for q in range(len(self)))


# ---------------------------------------------------------------------------
# per-step wrappers for a single (triangle, sensor)


def _single(config: SensorConfig) -> tuple:
    return SensorRig([config]).packed


@dataclass(frozen=True)
class FilterResult:
    passed: bool
    cause: str | None
    delta_min: float


_CAUSES = {K.REJECT_BACKFACE: "back-face", K.REJECT_AREA: "apparent-area", K.REJECT_RANGE: "range"}


def origin_filters(tri, config: SensorConfig, thresholds: Thresholds = Thresholds()) -> FilterResult:
    """Back-face, apparent-area and range filters, in that order."""
    a, b, c = _tri64(tri)
    out, dm = K.origin_filters(a, b, c, _vec(config.origin), thresholds.facing_code,
                               thresholds.eps_a, config.d_min, config.d_max, thresholds.near_code)
    return FilterResult(out == K.PASS, _CAUSES.get(out), dm)


def predict_channel_span(tri, config: SensorConfig, delta_min: float, apex=None) -> tuple[int, int] | None:
    a, b, c = _tri64(tri)
    org, basis, ipar, fpar, _, phi_star = _single(config)
    if apex is None:
        apex = K.apex_hits(a, b, c, _vec(config.origin), _vec(config.frame.up))
    c_from, c_to, _ = K.channel_span(a, b, c, org, basis, ipar, fpar, phi_star, 0,
                                     bool(apex[0]), bool(apex[1]), float(delta_min))
    return None if c_from < 0 else (int(c_from), int(c_to))


def predict_ray_span_fast(tri, config: SensorConfig) -> tuple[bool, tuple[int, int] | None]:
    """(all_cw, (r_from, r_to)) with r_to inclusive and possibly wrapped.

    When the seam test fails on a full-azimuth sensor the span is None.
    """
    a, b, c = _tri64(tri)
    org, basis, ipar, fpar, theta_star, _ = _single(config)
    cls_cw, _, r_from, count = K.ray_span_fast(a, b, c, org, basis, ipar, fpar, theta_star, 0)
    if count == 0:
        return bool(cls_cw), None
    return bool(cls_cw), (int(r_from), int((r_from + count - 1) % config.chi_n))


def classify_sat_bat(all_cw: bool, c_span: tuple[int, int], r_span, thresholds: Thresholds,
                     chi_n: int | None = None) -> str:
    if not all_cw or r_span is None:
        return "BAT"
    gamma_span = c_span[1] - c_span[0] + 1
    r_from, r_to = r_span
    chi_span = r_to - r_from + 1 if chi_n is None else (r_to - r_from) % chi_n + 1
    return "SAT" if gamma_span <= thresholds.gamma_t and chi_span <= thresholds.chi_t else "BAT"


def resolve_channel_ray_span(entry: DeferredBatEntry | None, tri, config: SensorConfig, j: int,
                             origin: int = 0, delta_min: float | None = None, apex=None):
    """Exact ray span of one channel.

    Returns ``None`` (skip), ``"full"``, or ``(lo, hi)`` ray indices of the
    crossings before arc disambiguation.
    """
    a, b, c = _tri64(tri)
    org, basis, ipar, fpar, theta_star, phi_star = _single(config)
    if entry is not None:
        flags = int(entry.flags[origin])
        dm = float(entry.delta_min[origin])
    else:
        if apex is None:
            apex = K.apex_hits(a, b, c, _vec(config.origin), _vec(config.frame.up))
        flags = K.FLAG_ACTIVE | (K.FLAG_APEX_POS if apex[0] else 0) | (K.FLAG_APEX_NEG if apex[1] else 0)
        dm = K.closest_point_distance(_vec(config.origin), a, b, c) if delta_min is None else delta_min
    status, _, _, lo, hi = K.resolve_channel(a, b, c, org, basis, ipar, fpar, theta_star, phi_star, 0, int(j),
                                             flags, float(dm), np.empty((4, 3)))
    if status == 0:
        return None
    if status == 3:
        return "full"
    return int(lo), int(hi)


def reflect_across_up(d, up) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    return 2.0 * (d @ up) * up - d


def disambiguate_arc(tri, config: SensorConfig, j: int, r_from: int, r_to: int,
                     thresholds: Thresholds = Thresholds()) -> bool:
    """True when the clockwise arc [r_from, r_to] is the one covering the triangle."""
    a, b, c = _tri64(tri)
    chi = config.chi_n
    mid = (r_from + (r_to - r_from + 1) // 2) % chi
    d = config.grid.direction(j, mid)
    dirs = np.ascontiguousarray(d.reshape(3, 1), dtype=np.float32)
    cw, _ = K.disambiguate(a, b, c, _vec(config.origin), _vec(config.frame.up),
                           thresholds.facing_code, dirs, 0, thresholds.eps_face)
    return bool(cw)


# ---------------------------------------------------------------------------
# passes


def as_triangles(scene) -> np.ndarray:
    """Coerce a scene to a contiguous (n, 3, 3) float32 array."""
    if hasattr(scene, "triangles") and not isinstance(scene, np.ndarray):
        scene = scene.triangles
    t = np.asarray(scene, dtype=np.float32)
    if t.size == 0:
        return np.zeros((0, 3, 3), dtype=np.float32)
    return np.ascontiguousarray(t.reshape(-1, 3, 3))


def _partitions(n: int, threads: int) -> list[tuple[int, int]]:
    parts = 1 if threads <= 1 else threads * 4
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).astype(np.int64)
    return [(int(edges[p]), int(edges[p + 1])) for p in range(parts)]


def _run_partitions(fn, parts, threads):
    if threads <= 1 or len(parts) <= 1:
        return [fn(lo, hi) for lo, hi in parts]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda p: fn(*p), parts))


def brute_force_bound(n_triangles: int, rig: SensorRig) -> int:
    return int(n_triangles) * rig.ray_count


def run_early_pass(triangles, sensors, thresholds: Thresholds, buffer: HitBuffer,
                   counters: RticCounters | None = None, threads: int = 1) -> DeferredList:
    tris = as_triangles(triangles)
    rig = SensorRig.coerce(sensors)
    org, basis, ipar, fpar, theta_star, phi_star = rig.packed
    dirs = rig.directions
    n_t, n_o = tris.shape[0], len(rig)
    d_cfrom = np.zeros((n_t, n_o), dtype=np.int32)
    d_cto = np.zeros((n_t, n_o), dtype=np.int32)
    d_dmin = np.zeros((n_t, n_o), dtype=np.float32)
    d_flags = np.zeros((n_t, n_o), dtype=np.uint8)
    bat_any = np.zeros(n_t, dtype=np.bool_)

    def work(lo, hi):
        buf = np.full(buffer.values.size, ENCODED_INF, dtype=np.uint32)
        counts = np.zeros(K.N_COUNTERS, dtype=np.int64)
        K.early_pass(tris, lo, hi, org, basis, ipar, fpar, theta_star, phi_star, dirs,
                     thresholds.gamma_t, thresholds.chi_t, thresholds.eps_a, thresholds.facing_code,
                     thresholds.near_code, buf, d_cfrom, d_cto, d_dmin, d_flags, bat_any, counts)
        return buf, counts

    results = _run_partitions(work, _partitions(n_t, threads), threads) if n_t and n_o else []
    for buf, counts in results:
        buffer.merge(buf)
        if counters is not None:
            counters.add(counts)
    idx = np.flatnonzero(bat_any)
    if idx.size > thresholds.deferred_soft_cap:
        warnings.warn(f"deferred list holds {idx.size} entries, above the soft cap "
                      f"{thresholds.deferred_soft_cap}", RuntimeWarning, stacklevel=2)
    return DeferredList(idx.astype(np.int64), d_cfrom[idx], d_cto[idx], d_dmin[idx], d_flags[idx])


def run_late_pass(deferred: DeferredList, triangles, sensors, thresholds: Thresholds, buffer: HitBuffer,
                  counters: RticCounters | None = None, threads: int = 1) -> None:
    if len(deferred) == 0:
        return
    tris = as_triangles(triangles)
    rig = SensorRig.coerce(sensors)
    org, basis, ipar, fpar, theta_star, phi_star = rig.packed
    dirs = rig.directions
    entries = np.ascontiguousarray(deferred.triangles, dtype=np.int64)
    cf = np.ascontiguousarray(deferred.c_from)
    ct = np.ascontiguousarray(deferred.c_to)
    dm = np.ascontiguousarray(deferred.delta_min)
    fl = np.ascontiguousarray(deferred.flags)

    def work(lo, hi):
        buf = np.full(buffer.values.size, ENCODED_INF, dtype=np.uint32)
        counts = np.zeros(K.N_COUNTERS, dtype=np.int64)
        K.late_pass(tris, entries, lo, hi, org, basis, ipar, fpar, theta_star, phi_star, dirs,
                    thresholds.eps_face, thresholds.facing_code, buf, cf, ct, dm, fl, counts)
        return buf, counts

    for buf, counts in _run_partitions(work, _partitions(len(deferred), threads), threads):
        buffer.merge(buf)
        if counters is not None:
            counters.add(counts)


def cast_frame(scene, sensors, thresholds: Thresholds = Thresholds(),
               threads: int = 1) -> tuple[HitBuffer, RticCounters]:
    """Early pass, then late pass, into a fresh buffer."""
    tris = as_triangles(scene)
    rig = SensorRig.coerce(sensors)
    buffer = HitBuffer(rig.ray_count)
    counters = RticCounters(brute_force_bound=brute_force_bound(tris.shape[0], rig))
    deferred = run_early_pass(tris, rig, thresholds, buffer, counters, threads)
    run_late_pass(deferred, tris, rig, thresholds, buffer, counters, threads)
    return buffer, counters


def hybrid_cast_frame(dynamic, static_bvh, sensors, thresholds: Thresholds = Thresholds(),
                      threads: int = 1) -> HitBuffer:
    """Caster on dynamic triangles, BVH on static ones, per-ray min-merge.

    ``static_bvh`` is a prebuilt reference BVH, or None for no static geometry.
    """
    from .reference import bvh_cast

    rig = SensorRig.coerce(sensors)
    dyn = as_triangles(dynamic)
    if static_bvh is None or static_bvh.n_triangles == 0:
        return cast_frame(dyn, rig, thresholds, threads)[0]
    static_buf = bvh_cast(static_bvh, rig, facing=thresholds.facing)
    if dyn.shape[0] == 0:
        return static_buf
    return static_buf.merge(cast_frame(dyn, rig, thresholds, threads)[0])


__all__ = [
    "Thresholds", "SpanRect", "RticCounters", "DeferredBatEntry", "DeferredList", "FilterResult",
    "origin_filters", "predict_channel_span", "predict_ray_span_fast", "classify_sat_bat",
    "resolve_channel_ray_span", "reflect_across_up", "disambiguate_arc", "run_early_pass",
    "run_late_pass", "cast_frame", "hybrid_cast_frame", "as_triangles",
]
