import math

import numpy as np
import pytest

from oracles import grid_support_stable, mc_overlap, random_box_pair, stacked_pair
from sport.errors import SceneMismatch
from sport.geometry import OrientedBox, Pose, rot_z
from sport.physics import (
    STABILITY_MARGIN,
    collision_check,
    displacement_check,
    is_supported,
    obb_penetration,
    place_and_settle,
    settle,
    stability_check,
    support_polygon,
    validate_placement,
)
from sport.scene import ObjectModel, Role, Scene, SceneObject, Workspace

BIG_WS = Workspace(-3.0, 3.0, -3.0, 3.0, 3.0)


def _model(i, h):
    return ObjectModel(f"m{i}", "box", h, (0.5, 0.5, 0.5))


def _scene(specs, workspace=BIG_WS):
    """specs: (half_extents, xyz, yaw)."""
    objs = [SceneObject(_model(i, h), Pose.from_xyz_yaw(xyz, yaw)) for i, (h, xyz, yaw) in enumerate(specs)]
    return Scene(tuple(objs), workspace)


def _unit(xyz, yaw=0.0):
    return ([0.5, 0.5, 0.5], xyz, yaw)


# --- settle -------------------------------------------------------------------


def test_settle_drops_to_table():
    s = settle(_scene([_unit([0, 0, 1.0]), _unit([2, 0, 0.5])]))
    assert s.objects[0].box.z_range()[0] == pytest.approx(0.0, abs=1e-12)


def test_settle_stacks_on_larger_box():
    s = _scene([([0.3, 0.3, 0.2], [0, 0, 0.2], 0.0), ([0.05, 0.05, 0.05], [0.1, 0.1, 1.5], 0.7)])
    out = settle(s)
    # footprints overlap, so the small box stops at the large box's top
    assert out.objects[1].box.z_range()[0] == pytest.approx(0.4, abs=1e-12)
    np.testing.assert_array_equal(out.objects[1].pose.rotation, s.objects[1].pose.rotation)


def test_settle_misses_disjoint_support():
    s = _scene([([0.3, 0.3, 0.2], [0, 0, 0.2], 0.0), ([0.05, 0.05, 0.05], [1.0, 0.0, 1.5], 0.0)])
    assert settle(s).objects[1].box.z_range()[0] == pytest.approx(0.0, abs=1e-12)


def test_settle_resting_unchanged_and_idempotent():
    s = _scene([_unit([0, 0, 0.5]), _unit([1.5, 0, 0.5])])
    assert settle(s) == s
    rng = np.random.default_rng(0)
    for _ in range(20):
        specs = [(rng.uniform(0.02, 0.1, 3), [*rng.uniform(-0.2, 0.2, 2), rng.uniform(0.1, 0.6)], rng.uniform(-3, 3)) for _ in range(4)]
        once = settle(_scene(specs))
        assert settle(once) == once


# --- collision ----------------------------------------------------------------


def test_far_apart_free():
    ok, pairs = collision_check(_scene([_unit([0, 0, 0.5]), _unit([2, 0, 0.5])]))
    assert ok and pairs == []


def test_overlap_depth():
    ok, pairs = collision_check(_scene([_unit([0, 0, 0.5]), _unit([0.9, 0, 0.5])]))
    assert not ok
    (i, j, d), = pairs
    assert (i, j) == (0, 1) and d == pytest.approx(0.1, abs=1e-12)


def test_touching_is_not_collision():
    assert collision_check(_scene([_unit([0, 0, 0.5]), _unit([1.0, 0, 0.5])]))[0]


def test_rotated_cube_matches_monte_carlo():
    a = OrientedBox([0, 0, 0], [0.5, 0.5, 0.5])
    for dist, expect in ((1.2, True), (1.25, False)):
        # a 45 degree cube reaches 0.707 along x; 0.5 + 0.707 = 1.207
        b = OrientedBox([dist, 0, 0], [0.5, 0.5, 0.5], rot_z(math.pi / 4))
        assert (obb_penetration(a, b) > 0) == expect
        assert mc_overlap(a, b) == expect


def test_sat_no_false_negatives_vs_monte_carlo():
    rng = np.random.default_rng(1)
    for k in range(60):
        a, b = random_box_pair(rng)
        if mc_overlap(a, b, 20_000, seed=k):
            assert obb_penetration(a, b) > 0


def test_sat_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = random_box_pair(rng)
        assert obb_penetration(a, b) == pytest.approx(obb_penetration(b, a), abs=1e-12)


# --- stability ----------------------------------------------------------------


def test_cube_on_table_stable():
    assert stability_check(_scene([_unit([0, 0, 0.5]), _unit([2, 0, 0.5])]))[0]


def test_overhang_unstable():
    # 60% of the top cube's footprint hangs past the lower cube's edge
    s = _scene([([0.1, 0.1, 0.1], [0, 0, 0.1], 0.0), ([0.1, 0.1, 0.1], [0.12, 0, 0.3], 0.0)])
    ok, unstable = stability_check(s)
    assert not ok and unstable == [1]


def test_partial_overhang_still_stable():
    s = _scene([([0.1, 0.1, 0.1], [0, 0, 0.1], 0.0), ([0.1, 0.1, 0.1], [0.08, 0, 0.3], 0.0)])
    assert stability_check(s)[0]


def test_floating_unstable():
    s = _scene([_unit([0, 0, 0.55]), _unit([2, 0, 0.5])])
    assert stability_check(s) == (False, [0])
    assert support_polygon(s, 0) is None


def test_table_edge_overhang():
    ws = Workspace(-1.0, 1.0, -1.0, 1.0, 1.0)
    # spans x in [0.92, 1.12]; its center is past the table edge at x = 1
    s = _scene([([0.1, 0.1, 0.1], [1.02, 0, 0.1], 0.0), ([0.1, 0.1, 0.1], [0, 0, 0.1], 0.0)], ws)
    assert not is_supported(s, 0)
    assert is_supported(s, 1)


def test_stability_matches_grid_oracle():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(60):
        base, top = stacked_pair(rng)
        s = Scene((SceneObject(_model(0, base.half_extents), base.pose), SceneObject(_model(1, top.half_extents), top.pose)), BIG_WS)
        expect, clearance = grid_support_stable(base, top, STABILITY_MARGIN)
        if abs(clearance - STABILITY_MARGIN) < 2e-3:
            continue
        assert is_supported(s, 1) == expect
        checked += 1
    assert checked > 30


# --- displacement and validation ----------------------------------------------


def test_displacement():
    s = _scene([_unit([0, 0, 0.5]), _unit([2, 0, 0.5]), _unit([-2, 0, 0.5])])
    assert displacement_check(s, s, 0) == (False, [])
    nudged = s.with_pose(1, Pose.from_xyz_yaw([2.01, 0, 0.5]))
    moved, lst = displacement_check(s, nudged, 0)
    assert moved and lst[0][0] == 1 and lst[0][1] == pytest.approx(0.01)
    only_movable = s.with_pose(0, Pose.from_xyz_yaw([0.3, 0, 0.5]))
    assert displacement_check(s, only_movable, 0) == (False, [])


def test_displacement_mismatch():
    a = _scene([_unit([0, 0, 0.5]), _unit([2, 0, 0.5])])
    b = _scene([_unit([0, 0, 0.5]), _unit([2, 0, 0.5]), _unit([-2, 0, 0.5])])
    with pytest.raises(SceneMismatch):
        displacement_check(a, b, 0)


def test_validate_placement_cases():
    before = _scene([([0.1, 0.1, 0.1], [0, 0, 0.1], 0.0), ([0.05, 0.05, 0.05], [0.5, 0, 0.05], 0.0)])
    stacked = place_and_settle(before, 1, Pose.from_xyz_yaw([0.0, 0.0, 0.5], 0.2))
    rep = validate_placement(stacked, before, 1)
    assert rep.ok and rep.to_dict()["collision_free"]
    inside = before.with_pose(1, Pose.from_xyz_yaw([0.02, 0, 0.05]))
    rep = validate_placement(inside, before, 1)
    assert not rep.collision_free and rep.colliding_pairs[0][:2] == (0, 1)
    over = place_and_settle(before, 1, Pose.from_xyz_yaw([0.14, 0.0, 0.5]))
    rep = validate_placement(over, before, 1)
    assert not rep.stable and rep.unstable_objects == [1]


def test_validate_translation_invariant():
    rng = np.random.default_rng(4)
    before = _scene([([0.1, 0.1, 0.1], [0, 0, 0.1], 0.0), ([0.05, 0.05, 0.05], [0.5, 0, 0.05], 0.3)])
    goal = place_and_settle(before, 1, Pose.from_xyz_yaw([0.08, 0.02, 0.5], 0.4))
    base = validate_placement(goal, before, 1).to_dict()
    for _ in range(5):
        d = np.array([*rng.uniform(-1, 1, 2), 0.0])
        shift = lambda s: Scene(tuple(type(o)(o.model, o.pose.with_translation(o.pose.translation + d), o.role) for o in s.objects), s.workspace)
        moved = validate_placement(shift(goal), shift(before), 1).to_dict()
        assert moved["collision_free"] == base["collision_free"] and moved["stable"] == base["stable"]
        assert moved["displaced"] == base["displaced"]


def test_place_and_settle_lifts_below_table():
    s = _scene([_unit([0, 0, 0.5]), _unit([2, 0, 0.5])])
    out = place_and_settle(s, 1, Pose.from_xyz_yaw([2, 0, -1.0]))
    assert out.objects[1].box.z_range()[0] == pytest.approx(0.0, abs=1e-12)
