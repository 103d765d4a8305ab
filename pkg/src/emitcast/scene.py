"""Meshes, instance transforms and the seeded motion / deformation streams.

Every random draw is addressed by (seed, instance, frame, stream id), so any
frame can be regenerated without replaying the ones before it.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .geometry import DEGENERATE_AREA

SMOOTH_PERIOD = 10
DEFAULT_SCALE_RANGE = (0.001, 30.0)


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 3) float32
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def __len__(self) -> int:
        return self.faces.shape[0]


def _areas(tris: np.ndarray) -> np.ndarray:
    t = tris.astype(np.float64)
    return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)


def _drop_degenerate(vertices, faces, source="mesh") -> np.ndarray:
    keep = _areas(np.asarray(vertices, dtype=np.float32)[faces]) >= DEGENERATE_AREA
    if not keep.all():
        warnings.warn(f"{source}: dropped {np.count_nonzero(~keep)} degenerate face(s)", stacklevel=3)
    return faces[keep]


def load_mesh(path) -> Mesh:
    """Read vertices and faces from an OBJ file; polygons are fan-triangulated."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs three coordinates")
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    faces += [[idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1)]
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: cannot parse OBJ line: {e}") from None
    if not faces:
        raise ValueError(f"{path}: mesh has no faces")
    v = np.array(verts, dtype=np.float32).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64)
    if f.min() < 0 or f.max() >= len(v):
        raise ValueError(f"{path}: face index out of range")
    f = _drop_degenerate(v, f, str(path))
    if not len(f):
        raise ValueError(f"{path}: every face is degenerate")
    return Mesh(v, f)


def write_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def box_mesh(extent=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> Mesh:
    """Axis-aligned box, 12 outward-wound triangles."""
    h = 0.5 * np.asarray(extent, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    v = c + corners * h
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = []
    for a, b, cc, d in quads:
        f += [(a, b, cc), (a, cc, d)]
    return Mesh(v, np.array(f))


def icosphere(subdivisions: int = 1, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
         (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return Mesh(np.asarray(center) + radius * np.array(verts), np.array(f))


def ground_grid(cells: int = 10, size: float = 100.0, height: float = 0.0) -> Mesh:
    """Square grid in the z = height plane, normals +z."""
    xs = np.linspace(-size / 2, size / 2, cells + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, height)], axis=1)
    f = []
    for i in range(cells):
        for j in range(cells):
            a = i * (cells + 1) + j
            b = a + cells + 1
            f += [(a, b, b + 1), (a, b + 1, a + 1)]
    return Mesh(v, np.array(f))


def merge_meshes(meshes) -> Mesh:
    vs, fs, off = [], [], 0
    for m in meshes:
        vs.append(m.vertices)
        fs.append(m.faces + off)
        off += m.vertices.shape[0]
    if not vs:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return Mesh(np.concatenate(vs), np.concatenate(fs))


# ---------------------------------------------------------------------------
# instances and motion


@dataclass(frozen=True, eq=False)
class InstanceState:
    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        s = np.asarray(self.scale, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError("rotation must be a unit quaternion")
        lo, hi = self.scale_range
        if np.any(s < lo - 1e-12) or np.any(s > hi + 1e-12):
            raise ValueError(f"scale outside [{lo}, {hi}]")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> InstanceState:
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]), np.ones(3))

    def as_record(self) -> np.ndarray:
        return np.concatenate([self.position, self.rotation, self.scale])

    @classmethod
    def from_record(cls, rec, scale_range=DEFAULT_SCALE_RANGE) -> InstanceState:
        rec = np.asarray(rec, dtype=np.float64)
        return cls(rec[0:3], rec[3:7], rec[7:10], scale_range)

    def matrix(self) -> np.ndarray:
        """3x3 linear part: rotate after per-axis scale."""
        w, x, y, z = self.rotation
        r = Rotation.from_quat([x, y, z, w]).as_matrix()
        return r * self.scale[None, :]

    def transform(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix().T + self.position

    def __eq__(self, other) -> bool:
        return isinstance(other, InstanceState) and np.array_equal(self.as_record(), other.as_record())


MOTION_LABELS = {
    "pos": ("smooth", "instant", "instant"),
    "rot": ("instant", "smooth", "instant"),
    "sc": ("instant", "instant", "smooth"),
    "p+r": ("smooth", "smooth", "instant"),
    "r+sc": ("instant", "smooth", "smooth"),
    "p+sc": ("smooth", "instant", "smooth"),
    "f.sm": ("smooth", "smooth", "smooth"),
    "f.i": ("instant", "instant", "instant"),
}


@dataclass(frozen=True)
class MotionConfig:
    """Per-DOF mode for position, rotation and scale."""

    position: str = "instant"
    rotation: str = "instant"
    scale: str = "instant"

    def __post_init__(self):
        for m in (self.position, self.rotation, self.scale):
            if m not in ("smooth", "instant"):
                raise ValueError(f"unknown motion mode {m!r}")

    @classmethod
    def from_label(cls, label: str) -> MotionConfig:
        if label not in MOTION_LABELS:
            raise ValueError(f"unknown motion label {label!r}; expected one of {list(MOTION_LABELS)}")
        return cls(*MOTION_LABELS[label])

    @property
    def label(self) -> str:
        key = (self.position, self.rotation, self.scale)
        return next(k for k, v in MOTION_LABELS.items() if v == key)


_POS, _ROT, _SCALE, _DEFORM = 0, 1, 2, 3


@dataclass(frozen=True)
class MotionStream:
    """Random-access sampler for one instance's keyframes.

    ``sample(dof, k)`` always returns the same draw for the same
    (seed, instance, dof, k).
    """

    seed: int
    instance: int = 0
    position_box: tuple = ((-50.0, -50.0, -5.0), (50.0, 50.0, 15.0))
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE

    def _rng(self, dof: int, k: int) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.seed), int(self.instance), dof, int(k)])
        return np.random.Generator(np.random.Philox(ss))

    def position(self, k: int) -> np.ndarray:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.position_box)
        return self._rng(_POS, k).uniform(lo, hi)

    def rotation(self, k: int) -> Rotation:
        return Rotation.random(random_state=self._rng(_ROT, k))

    def scale(self, k: int) -> np.ndarray:
        lo, hi = self.scale_range
        return self._rng(_SCALE, k).uniform(lo, hi, 3)


def _quat_wxyz(r: Rotation) -> np.ndarray:
    x, y, z, w = r.as_quat()
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def step_motion(config: MotionConfig, frame: int, stream: MotionStream) -> InstanceState:
    """Instance state at ``frame``.

    Instant DOFs draw a fresh value every frame.  Smooth DOFs draw keyframes
    every ten frames and interpolate between them (lerp for position and
    scale, slerp for rotation).
    """
    k0 = (frame // SMOOTH_PERIOD) * SMOOTH_PERIOD
    k1 = k0 + SMOOTH_PERIOD
    t = (frame - k0) / SMOOTH_PERIOD

    if config.position == "smooth":
        pos = (1 - t) * stream.position(k0) + t * stream.position(k1)
    else:
        pos = stream.position(frame)
    if config.rotation == "smooth":
        r0, r1 = stream.rotation(k0), stream.rotation(k1)
        rot = Slerp([0.0, 1.0], Rotation.concatenate([r0, r1]))([t])[0]
    else:
        rot = stream.rotation(frame)
    if config.scale == "smooth":
        sc = (1 - t) * stream.scale(k0) + t * stream.scale(k1)
    else:
        sc = stream.scale(frame)
    lo, hi = stream.scale_range
    return InstanceState(pos, _quat_wxyz(rot), np.clip(sc, lo, hi), stream.scale_range)


# ---------------------------------------------------------------------------
# deformation


DEFORMATIONS = ("ND", "OBD", "SWD")


def apply_deformation(triangles: np.ndarray, condition: str, seed: int, frame: int,
                      object_box=None, world_box=None, instance: int = 0) -> np.ndarray:
    """Per-frame triangle set under a deformation condition.

    ND returns the input.  OBD and SWD keep the triangle count but redraw
    every vertex uniformly inside the object box (of the posed instance)
    or the fixed world box.
    """
    tris = np.asarray(triangles, dtype=np.float32)
    if condition == "ND":
        return tris
    if condition == "OBD":
        box = object_box if object_box is not None else (tris.reshape(-1, 3).min(0), tris.reshape(-1, 3).max(0))
    elif condition == "SWD":
        if world_box is None:
            raise ValueError("SWD needs a world bounding box")
        box = world_box
    else:
        raise ValueError(f"unknown deformation condition {condition!r}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    ss = np.random.SeedSequence([int(seed), int(instance), _DEFORM, int(frame)])
    rng = np.random.Generator(np.random.Philox(ss))
    out = rng.uniform(lo, hi, size=tris.shape).astype(np.float32)
    # float32 rounding can step just outside the box
    return np.clip(out, lo.astype(np.float32), hi.astype(np.float32))


# ---------------------------------------------------------------------------
# pose stream file

_MAGIC = b"EMPS"
_VERSION = 1
_HEADER = struct.Struct("<4sIQII")
_RECORD = 10


@dataclass(frozen=True, eq=False)
class PoseStream:
    seed: int
    records: np.ndarray  # (frames, instances, 10)

    @property
    def frames(self) -> int:
        return self.records.shape[0]

    @property
    def instances(self) -> int:
        return self.records.shape[1]

    def state(self, frame: int, instance: int) -> InstanceState:
        return InstanceState.from_record(self.records[frame, instance], (0.0, np.inf))

    def __len__(self) -> int:
        return self.frames * self.instances

    def __eq__(self, other) -> bool:
        return isinstance(other, PoseStream) and self.seed == other.seed and \
            np.array_equal(self.records, other.records)


def generate_pose_stream(seed: int, frames: int, instances: int, motion: MotionConfig,
                         position_box=MotionStream.position_box,
                         scale_range=DEFAULT_SCALE_RANGE) -> PoseStream:
    rec = np.empty((frames, instances, _RECORD))
    for i in range(instances):
        st = MotionStream(seed, i, position_box, tuple(scale_range))
        for f in range(frames):
            rec[f, i] = step_motion(motion, f, st).as_record()
    return PoseStream(int(seed), rec)


def record_pose_stream(path, stream: PoseStream) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, stream.seed, stream.frames, stream.instances))
        fh.write(np.ascontiguousarray(stream.records, dtype="<f8").tobytes())


def replay_pose_stream(path) -> PoseStream:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("pose stream truncated: incomplete header")
    magic, version, seed, frames, instances = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError("not a pose stream file")
    if version != _VERSION:
        raise ValueError(f"pose stream version mismatch: file {version}, reader {_VERSION}")
    need = frames * instances * _RECORD * 8
    body = data[_HEADER.size:]
    if len(body) < need:
        raise ValueError(f"pose stream truncated: {len(body)} of {need} record bytes")
    rec = np.frombuffer(body[:need], dtype="<f8").reshape(frames, instances, _RECORD).astype(np.float64)
    return PoseStream(int(seed), rec)


# ---------------------------------------------------------------------------
# world assembly


@dataclass(frozen=True, eq=False)
class World:
    """Static geometry plus posed dynamic instances of template meshes."""

    static: Mesh | None
    templates: list = field(default_factory=list)  # one Mesh per instance
    world_box: tuple | None = None

    def __post_init__(self):
        if self.world_box is None:
            pts = [m.vertices for m in ([self.static] if self.static is not None else []) if len(m)]
            if pts:
                v = np.concatenate(pts)
                object.__setattr__(self, "world_box", (v.min(0), v.max(0)))

    def static_triangles(self) -> np.ndarray:
        if self.static is None or not len(self.static):
            return np.zeros((0, 3, 3), dtype=np.float32)
        return self.static.triangles

    def dynamic_triangles(self, poses: PoseStream, frame: int, condition: str = "ND",
                          seed: int | None = None) -> np.ndarray:
        seed = poses.seed if seed is None else seed
        out = []
        for i, mesh in enumerate(self.templates):
            st = poses.state(frame, i)
            tris = st.transform(mesh.triangles.reshape(-1, 3)).reshape(-1, 3, 3).astype(np.float32)
            pts = tris.reshape(-1, 3)
            box = (pts.min(0), pts.max(0))
            out.append(apply_deformation(tris, condition, seed, frame, box, self.world_box, i))
        if not out:
            return np.zeros((0, 3, 3), dtype=np.float32)
        return np.ascontiguousarray(np.concatenate(out))

    def triangles(self, poses: PoseStream, frame: int, condition: str = "ND") -> np.ndarray:
        """Static then dynamic triangles, float32 (n, 3, 3)."""
        return np.ascontiguousarray(np.concatenate(
            [self.static_triangles(), self.dynamic_triangles(poses, frame, condition)]))


def world_digest(triangles: np.ndarray) -> str:
    t = np.ascontiguousarray(triangles, dtype="<f4")
    return hashlib.sha256(t.tobytes()).hexdigest()
