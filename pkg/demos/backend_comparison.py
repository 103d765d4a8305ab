# Time the four backends on the same animated world and check they agree.
# Run with: python3 demos/backend_comparison.py [n_triangles]
import sys
import time

import numpy as np

from emitcast.harness import build_rig, build_world, pose_stream_for, random_config
from emitcast.pipeline import Thresholds, cast_frame, hybrid_cast_frame
from emitcast.reference import brute_force_cast, build_reference_bvh, bvh_cast, compare_hit_buffers

n_tri = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
cfg = random_config(11, n_tri, n_sensors=1, deformation="OBD", frames=5, channels=64, rays=1024)
world = build_world(cfg)
poses = pose_stream_for(cfg, world)
rig = build_rig(cfg)
th = Thresholds()
static = world.static_triangles()
static_bvh = build_reference_bvh(static)

# warm the compiled kernels so the first frame is not charged for it
cast_frame(static[:10], rig, th)


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, 1e3 * (time.perf_counter() - t0)


print(f"{n_tri} triangles, {rig.ray_count} rays per frame")
print("frame    grca ms   hybrid ms   bvh ms   brute ms   SAT   BAT   RTIC ratio   match")
for frame in range(cfg.frames):
    dyn = world.dynamic_triangles(poses, frame, cfg.deformation)
    tris = np.concatenate([static, dyn])
    (buf, counters), t_grca = timed(lambda: cast_frame(tris, rig, th))
    _, t_hyb = timed(lambda: hybrid_cast_frame(dyn, static_bvh, rig, th))
    _, t_bvh = timed(lambda: bvh_cast(build_reference_bvh(tris), rig))
    if frame == 0:
        ref, t_brute = timed(lambda: brute_force_cast(tris, rig))
        match = compare_hit_buffers(buf, ref).fraction
        brute, score = f"{t_brute:8.0f}", f"{match:.4%}"
    else:
        brute, score = "       -", "-"
    print(f"{frame:5d} {t_grca:9.1f} {t_hyb:11.1f} {t_bvh:8.1f} {brute:>10} "
          f"{counters.sat:5d} {counters.bat:5d} {counters.ratio:12.2e}   {score}")
