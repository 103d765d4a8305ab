"""Emitter-centric triangle ray caster for spinning range sensors."""

from .geometry import OrientedFrame, closest_point_distance, gacp_t_bool, gacp_t_full, moller_trumbore
from .harness import RunConfig, run, sweep
from .pipeline import Thresholds, cast_frame, hybrid_cast_frame
from .reference import brute_force_cast, build_reference_bvh, bvh_cast, compare_hit_buffers
from .scene import MotionConfig, World, load_mesh
from .sensor import HitBuffer, NoiseSpec, SensorConfig, SensorRig, finalize_output

__all__ = [
    "OrientedFrame", "closest_point_distance", "gacp_t_bool", "gacp_t_full", "moller_trumbore",
    "RunConfig", "run", "sweep",
    "Thresholds", "cast_frame", "hybrid_cast_frame",
    "brute_force_cast", "build_reference_bvh", "bvh_cast", "compare_hit_buffers",
    "MotionConfig", "World", "load_mesh",
    "HitBuffer", "NoiseSpec", "SensorConfig", "SensorRig", "finalize_output",
]
