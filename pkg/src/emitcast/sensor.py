"""Spinning-sensor model: configuration, ray grid, distance encoding, hit buffer.

Rays are laid out channel-major.  For origin ``n`` the global index of
channel ``j``, ray ``i`` is ``j * chi_n + i + ray_offset``.
"""

from __future__ import annotations

import dataclasses
import math
import threading
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import stats

from . import _kernels as K
from .geometry import OrientedFrame

ENCODED_INF = np.uint32(0xFF800000)


# ---------------------------------------------------------------------------
# order-preserving encoding


def encode_distance(d: float) -> int:
    """Map a float32 distance to a uint32 that sorts in the same order."""
    x = np.float32(d)
    if np.isnan(x):
        raise ValueError("cannot encode NaN")
    return int(encode_distances(np.array([x]))[0])


def decode_distance(u: int) -> float:
    return float(decode_distances(np.array([u], dtype=np.uint32))[0])


def encode_distances(d: np.ndarray) -> np.ndarray:
    u = np.ascontiguousarray(d, dtype=np.float32).view(np.uint32)
    m = (np.uint32(0) - (u >> np.uint32(31))).astype(np.uint32) | np.uint32(0x80000000)
    return u ^ m


def decode_distances(u: np.ndarray) -> np.ndarray:
    u = np.ascontiguousarray(u, dtype=np.uint32)
    m = ((u >> np.uint32(31)) - np.uint32(1)).astype(np.uint32) | np.uint32(0x80000000)
    return (u ^ m).view(np.float32)


# ---------------------------------------------------------------------------
# noise


def _centered_start(count: int, step: float) -> float:
    return -(count // 2) * step


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Materialized angular perturbation tables plus a range sigma.

    ``theta_star[i]`` replaces the nominal azimuth of ray ``i`` (shared by all
    channels) and ``phi_star[j]`` the nominal elevation of channel ``j``.
    Either table may be None.  Each perturbed angle must stay strictly within
    one grid step of its nominal value.
    """

    dtheta: float
    dphi: float
    theta0: float
    phi0: float
    theta_star: np.ndarray | None = None
    phi_star: np.ndarray | None = None
    distance_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.theta_star is not None:
            ts = np.asarray(self.theta_star, dtype=np.float64)
            if ts.ndim != 1:
                raise ValueError("theta_star must be one angle per ray index")
            nominal = self.theta0 + np.arange(ts.size) * self.dtheta
            if np.any(np.abs(ts - nominal) >= self.dtheta):
                raise ValueError("azimuth perturbation crosses an adjacent ray boundary")
            object.__setattr__(self, "theta_star", ts)
        if self.phi_star is not None:
            ps = np.asarray(self.phi_star, dtype=np.float64)
            if ps.ndim != 1:
                raise ValueError("per-ray vertical noise is not supported; give one elevation per channel")
            nominal = self.phi0 + np.arange(ps.size) * self.dphi
            if np.any(np.abs(ps - nominal) >= self.dphi):
                raise ValueError("elevation perturbation crosses an adjacent channel boundary")
            object.__setattr__(self, "phi_star", ps)
        if self.distance_sigma < 0:
            raise ValueError("distance_sigma must be >= 0")

    @classmethod
    def sample(cls, gamma_n: int, chi_n: int, dtheta: float, dphi: float, *,
               azimuth_sigma: float = 0.0, elevation_sigma: float = 0.0,
               distance_sigma: float = 0.0, seed: int = 0,
               theta0: float | None = None, phi0: float | None = None) -> NoiseSpec:
        """Draw Gaussian angle offsets, clipped to 0.45 of a step."""
        theta0 = _centered_start(chi_n, dtheta) if theta0 is None else theta0
        phi0 = _centered_start(gamma_n, dphi) if phi0 is None else phi0
        rng = np.random.Generator(np.random.Philox(key=seed))
        theta_star = phi_star = None
        if azimuth_sigma > 0:
            off = np.clip(rng.normal(0.0, azimuth_sigma, chi_n), -0.45 * dtheta, 0.45 * dtheta)
            theta_star = theta0 + np.arange(chi_n) * dtheta + off
        if elevation_sigma > 0:
            off = np.clip(rng.normal(0.0, elevation_sigma, gamma_n), -0.45 * dphi, 0.45 * dphi)
            phi_star = phi0 + np.arange(gamma_n) * dphi + off
        return cls(dtheta=dtheta, dphi=dphi, theta0=theta0, phi0=phi0, theta_star=theta_star,
                   phi_star=phi_star, distance_sigma=distance_sigma, seed=seed)


def noisy_ray_index(theta: float, i: int, spec: NoiseSpec) -> int:
    """Three-neighbour argmin over the perturbed azimuth table."""
    if spec.theta_star is None:
        return int(i)
    return int(K.argmin3(float(theta), int(i), spec.theta_star, spec.theta_star.size))


def noisy_channel_index(phi: float, j: int, spec: NoiseSpec) -> int:
    if spec.phi_star is None:
        return int(j)
    return int(K.argmin3(float(phi), int(j), spec.phi_star, spec.phi_star.size))


# ---------------------------------------------------------------------------
# configuration and grid


@dataclass(frozen=True, eq=False)
class SensorConfig:
    """One ray origin.

    ``theta0``/``phi0`` default to the centred start angles.  ``full_azimuth``
    defaults to whether the horizontal field of view exceeds 180 degrees.
    """

    origin: np.ndarray
    frame: OrientedFrame
    gamma_n: int
    chi_n: int
    dtheta: float
    dphi: float
    d_min: float = 0.05
    d_max: float = 1000.0
    ray_offset: int = 0
    theta0: float | None = None
    phi0: float | None = None
    full_azimuth: bool | None = None
    noise: NoiseSpec | None = None

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("origin", np.asarray(self.origin, dtype=np.float32).reshape(3))
        if self.gamma_n < 1 or self.chi_n < 1:
            raise ValueError("gamma_n and chi_n must be >= 1")
        if not (0 <= self.d_min < self.d_max):
            raise ValueError("require 0 <= d_min < d_max")
        if self.dtheta <= 0 or self.dphi <= 0:
            raise ValueError("angular steps must be positive")
        if self.theta0 is None:
            set_("theta0", _centered_start(self.chi_n, self.dtheta))
        if self.phi0 is None:
            set_("phi0", _centered_start(self.gamma_n, self.dphi))
        extent = (self.chi_n - 1) * self.dtheta
        if self.theta0 < -math.pi - 1e-9 or self.theta0 + extent > math.pi + 1e-9:
            raise ValueError("azimuth grid must lie within [-pi, pi]")
        if self.full_azimuth is None:
            set_("full_azimuth", self.chi_n * self.dtheta > math.pi + 1e-9)
        if not self.full_azimuth and extent > math.pi + 1e-9:
            raise ValueError("full_azimuth=False requires an azimuth extent <= pi")
        nz = self.noise
        if nz is not None:
            if nz.theta_star is not None and (nz.theta_star.size != self.chi_n or
                                              not np.isclose(nz.dtheta, self.dtheta) or
                                              not np.isclose(nz.theta0, self.theta0)):
                raise ValueError("noise azimuth table does not match the sensor grid")
            if nz.phi_star is not None and (nz.phi_star.size != self.gamma_n or
                                            not np.isclose(nz.dphi, self.dphi) or
                                            not np.isclose(nz.phi0, self.phi0)):
                raise ValueError("noise elevation table does not match the sensor grid")

    @classmethod
    def full_sphere(cls, gamma_n: int, chi_n: int, origin=(0.0, 0.0, 0.0),
                    frame: OrientedFrame | None = None, **kw) -> SensorConfig:
        """360 x 180 degree sensor with centred start angles."""
        return cls(origin=origin, frame=frame or OrientedFrame.identity(), gamma_n=gamma_n,
                   chi_n=chi_n, dtheta=2 * math.pi / chi_n, dphi=math.pi / gamma_n, **kw)

    @property
    def ray_count(self) -> int:
        return self.gamma_n * self.chi_n

    def theta(self, i) -> np.ndarray:
        return self.theta0 + np.asarray(i) * self.dtheta

    def phi(self, j) -> np.ndarray:
        return self.phi0 + np.asarray(j) * self.dphi

    @cached_property
    def grid(self) -> RayGrid:
        return build_ray_grid(self)


@dataclass(frozen=True, eq=False)
class RayGrid:
    """Per-ray unit directions, shape (3, gamma_n * chi_n), float32."""

    directions: np.ndarray
    gamma_n: int
    chi_n: int

    def __len__(self) -> int:
        return self.directions.shape[1]

    def direction(self, j: int, i: int) -> np.ndarray:
        return self.directions[:, j * self.chi_n + i]


def build_ray_grid(config: SensorConfig) -> RayGrid:
    theta = config.theta(np.arange(config.chi_n))
    phi = config.phi(np.arange(config.gamma_n))
    if config.noise is not None:
        if config.noise.theta_star is not None:
            theta = config.noise.theta_star
        if config.noise.phi_star is not None:
            phi = config.noise.phi_star
    th, ph = np.meshgrid(theta, phi)  # (gamma, chi), channel-major
    f, r, u = config.frame.forward, config.frame.right, config.frame.up
    cp = np.cos(ph).ravel()
    a = np.cos(th).ravel() * cp
    b = np.sin(th).ravel() * cp
    c = np.sin(ph).ravel()
    d = np.outer(f, a) + np.outer(r, b) + np.outer(u, c)
    return RayGrid(np.ascontiguousarray(d, dtype=np.float32), config.gamma_n, config.chi_n)


def global_ray_index(j: int, i: int, r_from: int, chi_n: int, offset: int) -> int:
    return j * chi_n + (r_from + i) % chi_n + offset


class SensorRig:
    """A set of origins with contiguous ray offsets and packed kernel arrays."""

    def __init__(self, configs):
        if isinstance(configs, SensorConfig):
            configs = [configs]
        placed = []
        offset = 0
        for c in configs:
            if c.ray_offset != offset:
                c = dataclasses.replace(c, ray_offset=offset)
            placed.append(c)
            offset += c.ray_count
        self.configs: list[SensorConfig] = placed
        self.ray_count = offset

    @classmethod
    def coerce(cls, sensors) -> SensorRig:
        return sensors if isinstance(sensors, SensorRig) else cls(sensors)

    def __len__(self) -> int:
        return len(self.configs)

    def __iter__(self):
        return iter(self.configs)

    def __getitem__(self, n) -> SensorConfig:
        return self.configs[n]

    @cached_property
    def directions(self) -> np.ndarray:
        if not self.configs:
            return np.zeros((3, 0), dtype=np.float32)
        return np.ascontiguousarray(np.concatenate([c.grid.directions for c in self.configs], axis=1))

    @cached_property
    def packed(self) -> tuple:
        """(org, basis, ipar, fpar, theta_star, phi_star) for the kernels."""
        n = len(self.configs)
        org = np.zeros((n, 3))
        basis = np.zeros((n, 3, 3))
        ipar = np.zeros((n, 6), dtype=np.int64)
        fpar = np.zeros((n, 6))
        chi_max = max((c.chi_n for c in self.configs), default=1)
        gamma_max = max((c.gamma_n for c in self.configs), default=1)
        theta_star = np.zeros((n, chi_max))
        phi_star = np.zeros((n, gamma_max))
        for k, c in enumerate(self.configs):
            org[k] = c.origin
            basis[k] = c.frame.as_matrix()
            h = c.noise is not None and c.noise.theta_star is not None
            v = c.noise is not None and c.noise.phi_star is not None
            ipar[k] = (c.gamma_n, c.chi_n, c.ray_offset, int(c.full_azimuth), int(h), int(v))
            fpar[k] = (c.theta0, c.dtheta, c.phi0, c.dphi, c.d_min, c.d_max)
            if h:
                theta_star[k, : c.chi_n] = c.noise.theta_star
            if v:
                phi_star[k, : c.gamma_n] = c.noise.phi_star
        return org, basis, ipar, fpar, theta_star, phi_star


# ---------------------------------------------------------------------------
# hit buffer


class HitBuffer:
    """Per-ray encoded nearest distance, min-merged across writers."""

    def __init__(self, size: int | None = None, values: np.ndarray | None = None):
        if values is None:
            values = np.full(int(size), ENCODED_INF, dtype=np.uint32)
        self.values = np.ascontiguousarray(values, dtype=np.uint32)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        return isinstance(other, HitBuffer) and np.array_equal(self.values, other.values)

    def copy(self) -> HitBuffer:
        return HitBuffer(values=self.values.copy())

    def record_hit(self, index: int, d: float) -> None:
        if not d >= 0:
            raise ValueError("hit distance must be a non-negative number")
        e = np.uint32(encode_distance(d))
        with self._lock:
            if e < self.values[index]:
                self.values[index] = e

    def merge(self, other: HitBuffer | np.ndarray) -> HitBuffer:
        vals = other.values if isinstance(other, HitBuffer) else other
        with self._lock:
            np.minimum(self.values, vals, out=self.values)
        return self

    def distances(self) -> np.ndarray:
        return decode_distances(self.values)

    def hit_mask(self) -> np.ndarray:
        return self.values != ENCODED_INF


def record_hit(buffer: HitBuffer, index: int, d: float) -> None:
    buffer.record_hit(index, d)


def merge_buffers(*buffers: HitBuffer) -> HitBuffer:
    out = buffers[0].copy()
    for b in buffers[1:]:
        out.merge(b)
    return out


@dataclass(frozen=True, eq=False)
class RayRecords:
    """Finalized output: per-ray direction and distance (+inf for a miss)."""

    directions: np.ndarray  # (N, 3) float32
    distances: np.ndarray  # (N,) float32


def finalize_output(buffer: HitBuffer, sensors, frame: int = 0) -> RayRecords:
    """Decode distances; apply per-origin range noise to hits if configured.

    Range noise is zero-mean Gaussian truncated so the distance stays at or
    above ``d_min``; it is seeded by (noise seed, frame) for exact replay.
    """
    rig = SensorRig.coerce(sensors)
    dist = buffer.distances().copy()
    for c in rig:
        nz = c.noise
        if nz is None or nz.distance_sigma <= 0:
            continue
        sl = slice(c.ray_offset, c.ray_offset + c.ray_count)
        seg = dist[sl].astype(np.float64)
        hit = np.isfinite(seg)
        if not hit.any():
            continue
        rng = np.random.Generator(np.random.Philox(key=(int(nz.seed) << 32) | (int(frame) & 0xFFFFFFFF)))
        loc = seg[hit]
        lower = (c.d_min - loc) / nz.distance_sigma
        seg[hit] = stats.truncnorm.rvs(lower, np.inf, loc=loc, scale=nz.distance_sigma, random_state=rng)
        dist[sl] = seg.astype(np.float32)
    return RayRecords(directions=np.ascontiguousarray(rig.directions.T), distances=dist)
