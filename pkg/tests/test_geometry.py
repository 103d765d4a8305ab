import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_triangles
from emitcast.geometry import (
    DegenerateTriangleError, OrientedFrame, Triangle, apex_ray_hits, channel_index_of_point,
    closest_point_distance, derive, gacp_t_bool, gacp_t_full, moller_trumbore, ray_direction,
    ray_index_of_point,
)

O = (0.0, 0.0, 0.0)
UP = (0.0, 0.0, 1.0)


# --- frames and directions -------------------------------------------------

def test_frame_rejects_bad_axes():
    with pytest.raises(ValueError):
        OrientedFrame((1, 0, 0), (1, 0, 0), (0, 0, 1))
    with pytest.raises(ValueError):
        OrientedFrame((1, 0, 0), (0, -1, 0), (0, 0, 1))  # left-handed
    with pytest.raises(ValueError):
        OrientedFrame((2, 0, 0), (0, 1, 0), (0, 0, 1))


def test_frame_from_forward_up_is_right_handed():
    f = OrientedFrame.from_forward_up((1, 1, 0), (0, 0, 1))
    assert np.allclose(np.cross(f.forward, f.right), f.up)


@pytest.mark.parametrize("theta,phi,expect", [
    (0.0, 0.0, (1, 0, 0)),
    (math.pi / 2, 0.0, (0, 1, 0)),
    (0.0, math.pi / 2, (0, 0, 1)),
])
def test_ray_direction_axes(identity, theta, phi, expect):
    assert np.allclose(ray_direction(theta, phi, identity), expect, atol=1e-12)


@given(st.floats(-math.pi, math.pi), st.floats(-math.pi / 2, math.pi / 2))
def test_ray_direction_unit(theta, phi):
    f = OrientedFrame.from_forward_up((0.3, -0.2, 0.9), (0.1, 1.0, 0.2))
    assert abs(np.linalg.norm(ray_direction(theta, phi, f)) - 1.0) <= 1e-6


# --- index lookups ---------------------------------------------------------

@pytest.mark.parametrize("p,expect", [((1, 0, 0), 2), ((0, 0, 1), 3), ((0, 0, -1), 0)])
def test_channel_index_examples(identity, p, expect):
    assert channel_index_of_point(p, O, identity, -math.pi / 2, math.pi / 4, 4) == expect


@pytest.mark.parametrize("p,expect", [((1, 0, 0), 4), ((0, 1, 0), 6), ((-1, 0, 0), 7)])
def test_ray_index_examples(identity, p, expect):
    assert ray_index_of_point(p, O, identity, -math.pi, math.pi / 4, 8) == expect


def test_index_errors(identity):
    with pytest.raises(ValueError, match="degenerate direction"):
        channel_index_of_point(O, O, identity, 0.0, 0.1, 4)
    with pytest.raises(ValueError, match="spin axis"):
        ray_index_of_point((0, 0, 3), O, identity, 0.0, 0.1, 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 62), st.sampled_from([0.5, 10.0, 500.0]),
       st.integers(0, 3))
def test_index_round_trip(j, i, kappa, frame_id):
    frames = [OrientedFrame.identity(), OrientedFrame.from_forward_up((0, 1, 0), (1, 0, 1)),
              OrientedFrame.from_forward_up((1, 2, 3), (0, 0, 1)),
              OrientedFrame.from_forward_up((-1, 0, 0.2), (0.2, 0.3, 1))]
    f = frames[frame_id]
    gamma, chi = 32, 64
    dphi, dtheta = math.pi / gamma, 2 * math.pi / chi
    phi0, theta0 = -(gamma // 2) * dphi, -(chi // 2) * dtheta
    o = np.array([3.0, -2.0, 1.0])
    p = o + kappa * ray_direction(theta0 + i * dtheta, phi0 + j * dphi, f)
    assert channel_index_of_point(p, o, f, phi0, dphi, gamma) == j
    assert ray_index_of_point(p, o, f, theta0, dtheta, chi) == i


# --- Moller-Trumbore -------------------------------------------------------

WALL = [(5, -1, -1), (5, 1, -1), (5, 0, 1)]


def test_moller_trumbore_examples():
    assert moller_trumbore(O, (1, 0, 0), WALL) == pytest.approx(5.0, abs=1e-12)
    assert moller_trumbore(O, (-1, 0, 0), WALL) is None
    assert moller_trumbore(O, (0, 1, 0), WALL) is None


def test_moller_trumbore_matches_oracle():
    rng = np.random.default_rng(3)
    tris = random_triangles(rng, 200, 2, 20, 2.0)
    dirs = rng.normal(size=(400, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    ref = oracles.ray_triangle_t(O, dirs, tris)
    hits = 0
    for a in range(dirs.shape[0]):
        for k in range(0, tris.shape[0], 7):
            t = moller_trumbore(O, dirs[a], tris[k])
            if np.isnan(ref[a, k]):
                assert t is None
            else:
                hits += 1
                assert t == pytest.approx(ref[a, k], rel=1e-12)
    assert hits > 0


# --- closest point ---------------------------------------------------------

def test_closest_point_examples():
    assert closest_point_distance(O, [(3, -1, -1), (3, 1, -1), (3, 0, 1)]) == pytest.approx(3.0)
    tri = [(4, 1, 0), (5, 1, 0), (4, 2, 0)]
    assert closest_point_distance(O, tri) == pytest.approx(math.sqrt(17), abs=1e-12)
    assert closest_point_distance(O, tri) == pytest.approx(oracles.closest_distance_sampled(O, tri), abs=1e-3)
    assert closest_point_distance((4, 1, 0), tri) == 0.0


def test_closest_point_vs_sampling():
    rng = np.random.default_rng(11)
    for k in range(60):
        tri = rng.normal(size=(3, 3))
        o = rng.normal(size=3) * 2
        exact = closest_point_distance(o, tri.astype(np.float32))
        sampled = oracles.closest_distance_sampled(o, tri.astype(np.float32).astype(np.float64), seed=k)
        assert sampled >= exact - 1e-9
        assert sampled - exact <= 1e-3


# --- channel surface test --------------------------------------------------

PLANE_TRI = [(1, 0, 1), (1, 1, -1), (2, 0, 1)]


def test_gacp_plane_case():
    g = gacp_t_full(PLANE_TRI, O, UP, 0.0, 0.5, 1000.0)
    assert g.count == 2 and not g.apex_hit
    # h = (1, -1, 1); edge (0,1) crosses at v0 + h0/(h0-h1) (v1-v0)
    assert any(np.allclose(p, (1, 0.5, 0)) for p in g.points)
    for p in g.points:
        assert abs(p[2]) <= 1e-12
    assert gacp_t_bool(PLANE_TRI, O, UP, 0.0, 0.5, 1000.0)


def test_gacp_quadratic_edge_example():
    # edge (1,0,0) -> (1,0,2) against the 45 degree cone
    w, e, u = np.array([1.0, 0, 0]), np.array([0.0, 0, 2]), np.array(UP)
    s2 = math.sin(math.pi / 4) ** 2
    c2 = (e @ u) ** 2 - s2 * (e @ e)
    c1 = 2 * ((e @ u) * (w @ u) - s2 * (w @ e))
    c0 = (w @ u) ** 2 - s2 * (w @ w)
    assert (c2, c1, c0) == pytest.approx((2.0, 0.0, -0.5))
    lam = (-c1 + math.sqrt(c1 * c1 - 4 * c2 * c0)) / (2 * c2)
    assert lam == pytest.approx(0.5)
    tri = [(1, 0, 0), (1, 0, 2), (1, 1, 2)]
    g = gacp_t_full(tri, O, UP, math.pi / 4, 1.0, 1000.0)
    assert g.count >= 1
    assert any(np.allclose(p, (1, 0, 1), atol=1e-9) for p in g.points)
    assert gacp_t_bool(tri, O, UP, math.pi / 4, 1.0, 1000.0)


def test_gacp_all_inside_and_wrong_half():
    inside = [(1, 0, 10), (0, 1, 10), (-1, -1, 10)]
    assert gacp_t_full(inside, O, UP, math.pi / 3, 10.0, 1000.0).count == 0
    assert not gacp_t_bool(inside, O, UP, math.pi / 3, 10.0, 1000.0)
    below = [(1, 0, -1), (2, 1, -2), (1, 1, -1)]
    assert not gacp_t_bool(below, O, UP, math.pi / 6, 1.0, 1000.0)
    assert gacp_t_full(below, O, UP, math.pi / 6, 1.0, 1000.0).count == 0


def test_gacp_apex_surround():
    # a roof above the sensor: all vertices outside a steep cone, apex ray hits
    roof = [(-5, -5, 3), (5, -5, 3), (0, 6, 3)]
    assert apex_ray_hits(roof, O, UP) == (True, False)
    assert gacp_t_full(roof, O, UP, math.radians(80), 3.0, 1000.0).apex_hit
    assert gacp_t_bool(roof, O, UP, math.radians(80), 3.0, 1000.0)
    # axial reach: the roof is beyond d_max * sin(phi)
    assert not gacp_t_full(roof, O, UP, math.radians(80), 3.0, 2.0).apex_hit


def _random_case(rng):
    o = rng.normal(size=3)
    tri = o + rng.normal(size=3) * rng.uniform(1, 10) + rng.normal(size=(3, 3)) * rng.uniform(0.1, 5)
    phi = rng.uniform(-math.pi / 2, math.pi / 2)
    return tri.astype(np.float32), o, phi


def test_gacp_bool_matches_full_and_residuals():
    rng = np.random.default_rng(5)
    u = np.array(UP)
    for _ in range(3000):
        tri, o, phi = _random_case(rng)
        dm = closest_point_distance(o, tri)
        full = gacp_t_full(tri, o, u, phi, dm, 1000.0)
        assert gacp_t_bool(tri, o, u, phi, dm, 1000.0) == (full.count >= 1 or full.apex_hit)
        for p in full.points:
            w = p - o
            r = np.linalg.norm(w)
            assert abs(w @ u - r * math.sin(phi)) <= 1e-3 * r


def test_degenerate_triangle_rejected():
    with pytest.raises(DegenerateTriangleError):
        Triangle((0, 0, 0), (1, 1, 1), (2, 2, 2))
    with pytest.raises(DegenerateTriangleError):
        derive([(0, 0, 0), (1, 0, 0), (2, 0, 0)])
    d = derive([(0, 0, 0), (1, 0, 0), (0, 1, 0)])
    assert d.area == pytest.approx(0.5) and np.allclose(d.normal, (0, 0, 1))
