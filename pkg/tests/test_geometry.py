import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sport.errors import DegenerateRotation, EmptyCloud, FormatError, NoVisiblePoints
from sport.geometry import (
    CameraPose,
    OrientedBox,
    PointCloud,
    Pose,
    dump_spcd,
    farthest_point_sample,
    is_rotation,
    load_spcd,
    obb_from_cloud,
    partial_view,
    rot_z,
    rotation_from_vectors,
    sample_box_surface,
    spcd_bytes,
    transform_cloud,
    visible_mask,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


# --- rotations ----------------------------------------------------------------


def test_rotation_from_orthonormal_pair_is_identity():
    np.testing.assert_allclose(rotation_from_vectors([1, 0, 0], [0, 1, 0]), np.eye(3), atol=1e-15)


def test_rotation_hand_gram_schmidt():
    # a normalizes to x, b minus its x part is y
    np.testing.assert_allclose(rotation_from_vectors([2, 0, 0], [1, 1, 0]), np.eye(3), atol=1e-15)


@pytest.mark.parametrize("a,b", [([1, 0, 0], [2, 0, 0]), ([0, 0, 0], [0, 1, 0]), ([1, 0, 0], [0, 0, 0]), ([1, 1, 0], [-3, -3, 0])])
def test_rotation_degenerate(a, b):
    with pytest.raises(DegenerateRotation):
        rotation_from_vectors(a, b)


def test_rotation_columns_follow_inputs():
    a, b = np.array([0.3, -1.0, 2.0]), np.array([1.0, 0.5, 0.1])
    R = rotation_from_vectors(a, b)
    np.testing.assert_allclose(R[:, 0], a / np.linalg.norm(a), atol=1e-12)
    assert abs(R[:, 1] @ a) < 1e-12
    assert R[:, 1] @ b > 0


def test_rotation_property_10k():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(10_000, 3))
    b = rng.normal(size=(10_000, 3))
    for i in range(len(a)):
        R = rotation_from_vectors(a[i], b[i])
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
        assert abs(np.linalg.det(R) - 1) < 1e-6


@given(vec3, vec3)
def test_rotation_valid_or_degenerate(a, b):
    try:
        R = rotation_from_vectors(a, b)
    except DegenerateRotation:
        return
    assert is_rotation(R)


# --- poses and clouds ---------------------------------------------------------


def test_pose_rejects_non_rotation():
    with pytest.raises(DegenerateRotation):
        Pose(np.zeros(3), np.diag([1.0, 1.0, -1.0]))


def test_pose_list_roundtrip_and_inverse():
    p = Pose([0.1, -0.2, 0.3], rotation_from_vectors([1, 2, 3], [0, 1, -1]))
    assert Pose.from_list(p.to_list()) == p
    q = p.compose(p.inverse())
    np.testing.assert_allclose(q.matrix(), np.eye(4), atol=1e-12)


def test_pose_is_immutable_and_does_not_freeze_inputs():
    t = np.array([1.0, 2.0, 3.0])
    p = Pose(t)
    t[0] = 9.0
    assert p.translation[0] == 1.0
    with pytest.raises(ValueError):
        p.translation[0] = 5.0


def test_transform_identity():
    c = PointCloud(np.random.default_rng(1).normal(size=(20, 3)))
    assert transform_cloud(c, Pose.identity()) == c


def test_transform_translation():
    out = transform_cloud(PointCloud([[0.0, 0.0, 0.0]]), Pose([1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(out.points, [[1.0, 0.0, 0.0]])


def test_transform_rot90():
    out = transform_cloud(PointCloud([[1.0, 0.0, 0.0]]), Pose(np.zeros(3), rot_z(math.pi / 2)))
    np.testing.assert_allclose(out.points, [[0.0, 1.0, 0.0]], atol=1e-9)


def test_transform_empty():
    with pytest.raises(EmptyCloud):
        transform_cloud(PointCloud(np.zeros((0, 3))), Pose.identity())


def test_transform_keeps_colors_and_distances():
    rng = np.random.default_rng(2)
    c = PointCloud(rng.normal(size=(30, 3)), rng.uniform(size=(30, 3)))
    p = Pose(rng.normal(size=3), rotation_from_vectors(rng.normal(size=3), rng.normal(size=3)))
    out = transform_cloud(c, p)
    np.testing.assert_array_equal(out.colors, c.colors)
    d0 = np.linalg.norm(c.points[:, None] - c.points[None], axis=-1)
    d1 = np.linalg.norm(out.points[:, None] - out.points[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-9


def test_cloud_color_count_mismatch():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros((2, 3)))


# --- boxes --------------------------------------------------------------------


def test_box_requires_positive_extents():
    with pytest.raises(ValueError):
        OrientedBox(np.zeros(3), [0.1, 0.0, 0.1])


def test_box_z_range_rotated():
    R = rotation_from_vectors([1, 0, 1], [0, 1, 0])
    box = OrientedBox([0, 0, 1.0], [0.5, 0.5, 0.5], R)
    lo, hi = box.z_range()
    v = box.vertices()
    assert lo == pytest.approx(v[:, 2].min(), abs=1e-12)
    assert hi == pytest.approx(v[:, 2].max(), abs=1e-12)


# --- partial views ------------------------------------------------------------


def _unit_cube():
    return OrientedBox(np.zeros(3), [0.5, 0.5, 0.5])


def test_partial_view_facing_side_only():
    cam = CameraPose.look_at((3.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    pc = partial_view(_unit_cube(), Pose.identity(), cam, samples=2000, seed=0)
    assert len(pc) > 0
    assert pc.points[:, 0].min() >= 0.5 - 1e-6


def test_partial_view_single_face_fully_visible():
    # a thin plate facing the camera: every sample on the near face is seen
    plate = OrientedBox(np.zeros(3), [1e-4, 0.2, 0.2])
    cam = CameraPose.look_at((2.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    pts, normals = sample_box_surface(plate, 4000, seed=3)
    mask = visible_mask(pts, normals, cam)
    near = normals[:, 0] > 0.5
    assert mask[near].all()
    assert not mask[normals[:, 0] < -0.5].any()


def test_partial_view_behind_camera():
    cam = CameraPose.look_at((3.0, 0.0, 0.0), (6.0, 0.0, 0.0))
    with pytest.raises(NoVisiblePoints):
        partial_view(_unit_cube(), Pose.identity(), cam, samples=200, seed=0)


def test_partial_view_fully_occluded():
    cam = CameraPose.look_at((3.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    small = OrientedBox(np.zeros(3), [0.05, 0.05, 0.05])
    wall = OrientedBox([1.5, 0.0, 0.0], [0.05, 1.0, 1.0])
    with pytest.raises(NoVisiblePoints):
        partial_view(small, Pose.identity(), cam, samples=500, seed=0, occluders=[wall])


def test_partial_view_camera_inside():
    cam = CameraPose.look_at((0.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        partial_view(_unit_cube(), Pose.identity(), cam)


def test_partial_view_deterministic():
    cam = CameraPose.look_at((1.0, -1.0, 1.0), (0.0, 0.0, 0.0))
    a = partial_view(_unit_cube(), Pose([0, 0, 0.1]), cam, 300, seed=5)
    b = partial_view(_unit_cube(), Pose([0, 0, 0.1]), cam, 300, seed=5)
    assert a == b


def _marched_occluded(eye, pixel_dir, depth, occluders, step=2e-4):
    """Independent occlusion oracle: march the pixel-center ray and test box containment."""
    ts = np.arange(step, depth * (1 - 1e-4), step)
    pts = eye + ts[:, None] * pixel_dir
    return any(box.contains(pts).any() for box in occluders)


def test_partial_view_matches_marched_zbuffer_oracle():
    cam = CameraPose.look_at((0.0, -0.75, 0.6), (0.0, 0.0, 0.0), focal=110.0, width=64, height=64)
    target = OrientedBox([0.0, 0.05, 0.05], [0.05, 0.05, 0.05], rot_z(0.3))
    occluder = OrientedBox([0.02, -0.1, 0.06], [0.04, 0.03, 0.06], rot_z(-0.2))
    pts, normals = sample_box_surface(target, 400, seed=11)
    mask = visible_mask(pts, normals, cam, [occluder])
    eye = cam.pose.translation
    facing = np.einsum("ij,ij->i", normals, eye - pts) > 0
    u, v, z = cam.project(pts)
    rays = cam.pixel_rays()
    checked = 0
    for i in np.flatnonzero(facing):
        col, row = int(np.floor(u[i])), int(np.floor(v[i]))
        ray = rays[row * cam.width + col]
        # skip samples whose pixel ray grazes the occluder boundary (within a march step)
        d_hi = _marched_occluded(eye, ray, z[i] * 1.01, [occluder])
        d_lo = _marched_occluded(eye, ray, z[i] * 0.99, [occluder])
        if d_hi != d_lo:
            continue
        assert mask[i] == (not d_lo), i
        checked += 1
    assert checked > 100
    assert 0 < mask.sum() < facing.sum()


# --- farthest point sampling --------------------------------------------------


def test_fps_single_point_repeated():
    out = farthest_point_sample(PointCloud([[1.0, 2.0, 3.0]]), 4, seed=0)
    np.testing.assert_array_equal(out.points, np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_fps_collinear():
    pts = np.array([[1.0, 0, 0], [0.0, 0, 0], [2.0, 0, 0]])
    out = farthest_point_sample(PointCloud(pts), 2, start=0)
    assert sorted(out.points[:, 0].tolist()) == [0.0, 2.0]


def test_fps_full_size_is_permutation():
    pts = np.random.default_rng(0).normal(size=(17, 3))
    out = farthest_point_sample(PointCloud(pts), 17, seed=1)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))


def test_fps_permutation_covariant():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(100, 3))
    a = farthest_point_sample(PointCloud(pts), 20, seed=9)
    b = farthest_point_sample(PointCloud(pts[rng.permutation(100)]), 20, seed=9)
    assert sorted(map(tuple, a.points)) == sorted(map(tuple, b.points))


def test_fps_points_from_input_and_spread():
    rng = np.random.default_rng(5)
    pts = rng.uniform(size=(300, 3))
    out = farthest_point_sample(PointCloud(pts), 10, seed=0)
    members = {tuple(p) for p in pts}
    assert all(tuple(p) in members for p in out.points)
    assert len({tuple(p) for p in out.points}) == 10


def test_fps_errors():
    with pytest.raises(EmptyCloud):
        farthest_point_sample(PointCloud(np.zeros((0, 3))), 3)
    with pytest.raises(ValueError):
        farthest_point_sample(PointCloud(np.zeros((2, 3))), 0)


# --- box fitting --------------------------------------------------------------


def test_obb_unit_cube_corners():
    corners = np.array(list(itertools.product([-0.5, 0.5], repeat=3)))
    box = obb_from_cloud(PointCloud(corners))
    np.testing.assert_allclose(box.center, 0, atol=1e-9)
    np.testing.assert_allclose(np.sort(box.half_extents), [0.5, 0.5, 0.5], atol=1e-9)


def _sweep_min_volume(pts, steps=3600):
    """Brute-force minimal yaw-swept AABB volume."""
    best = np.inf
    for th in np.linspace(0, math.pi / 2, steps, endpoint=False):
        local = pts @ rot_z(th)
        best = min(best, np.prod(local.max(0) - local.min(0)))
    return best


def test_obb_rotated_cube_against_sweep_oracle():
    corners = np.array(list(itertools.product([-0.5, 0.5], repeat=3))) @ rot_z(math.radians(30)).T
    box = obb_from_cloud(PointCloud(corners))
    assert box.contains(corners, tol=1e-6).all()
    assert box.volume() <= _sweep_min_volume(corners) * 1.1


def test_obb_random_clouds_contain_points():
    rng = np.random.default_rng(6)
    for _ in range(50):
        pts = rng.normal(size=(40, 3)) * rng.uniform(0.01, 0.3, size=3)
        pts = pts @ rotation_from_vectors(rng.normal(size=3), rng.normal(size=3)).T
        box = obb_from_cloud(PointCloud(pts))
        assert box.contains(pts, tol=1e-6).all()


def test_obb_single_point_fallback():
    box = obb_from_cloud(PointCloud([[0.1, 0.2, 0.3]]))
    np.testing.assert_allclose(box.center, [0.1, 0.2, 0.3])
    np.testing.assert_allclose(box.half_extents, 1e-4)


def test_obb_empty():
    with pytest.raises(EmptyCloud):
        obb_from_cloud(PointCloud(np.zeros((0, 3))))


# --- SPCD ---------------------------------------------------------------------


@settings(max_examples=30)
@given(st.integers(1, 50), st.booleans(), st.integers(0, 2**32 - 1))
def test_spcd_roundtrip(n, colored, seed):
    rng = np.random.default_rng(seed)
    c = PointCloud(rng.normal(size=(n, 3)).astype(np.float32), rng.uniform(size=(n, 3)).astype(np.float32) if colored else None)
    buf = io.BytesIO()
    dump_spcd(c, buf)
    back = load_spcd(io.BytesIO(buf.getvalue()))
    assert back == c
    assert spcd_bytes(back) == buf.getvalue()


def test_spcd_layout():
    c = PointCloud(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    data = spcd_bytes(c)
    assert data[:4] == b"SPCD"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == 1
    assert data[12] == 0
    assert np.frombuffer(data[13:], "<f4").tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("mutate", [
    lambda d: d[:-1],
    lambda d: b"XPCD" + d[4:],
    lambda d: d[:4] + (2).to_bytes(4, "little") + d[8:],
    lambda d: d[:12] + b"\x07" + d[13:],
    lambda d: d + b"\x00",
])
def test_spcd_corrupt(mutate):
    data = spcd_bytes(PointCloud(np.ones((3, 3), dtype=np.float32)))
    with pytest.raises(FormatError):
        load_spcd(io.BytesIO(mutate(data)))
