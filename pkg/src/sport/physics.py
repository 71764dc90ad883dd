"""Quasi-static stand-in for a physics engine.

Objects are rigid boxes. Validity of a placement is judged geometrically:
no pairwise interpenetration (separating-axis test), every object's center
of mass over its support polygon, and no object other than the moved one
displaced.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import MultiPoint, Point, box as shapely_box
from shapely.ops import unary_union

from .errors import SceneMismatch
from .geometry import OrientedBox, Pose, footprint, resting_height
from .scene import Scene

PENETRATION_TOL = 1e-4
DISPLACEMENT_TOL = 5e-3
STABILITY_MARGIN = 2e-3
# vertices within this height of the lowest point count as touching
CONTACT_TOL = 5e-3
# an object whose bottom sits at most this far below a support's top rests on it
SETTLE_SNAP = 1e-2


@dataclass
class ValidityReport:
    collision_free: bool
    colliding_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    stable: bool = True
    unstable_objects: list[int] = field(default_factory=list)
    displaced: bool = False
    displaced_objects: list[tuple[int, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.collision_free and self.stable and not self.displaced

    def to_dict(self) -> dict:
        return {
            "collision_free": self.collision_free,
            "colliding_pairs": [[int(i), int(j), float(d)] for i, j, d in self.colliding_pairs],
            "stable": self.stable,
            "unstable_objects": [int(i) for i in self.unstable_objects],
            "displaced": self.displaced,
            "displaced_objects": [[int(i), float(d)] for i, d in self.displaced_objects],
        }


def settle(scene: Scene, snap: float = SETTLE_SNAP) -> Scene:
    """Drop every object straight down onto the table or the objects below it.

    Objects are processed bottom-up (ties keep list order) so that an object
    only ever rests on objects that have already settled. Rotations are kept.
    """
    boxes = scene.boxes()
    order = sorted(range(len(boxes)), key=lambda i: (boxes[i].z_range()[0], i))
    settled: list[OrientedBox] = []
    out = scene
    for i in order:
        box = boxes[i]
        drop = box.z_range()[0] - resting_height(box, settled, snap)
        if abs(drop) > 1e-12:
            pose = scene.objects[i].pose
            t = np.array(pose.translation)
            t[2] -= drop
            out = out.with_pose(i, pose.with_translation(t))
            box = out.objects[i].box
        settled.append(box)
    return out


def obb_penetration(a: OrientedBox, b: OrientedBox) -> float:
    """Separating-axis test over the 15 candidate axes of two boxes.

    Returns the smallest projected overlap; negative means separated.
    """
    Ra, Rb = a.rotation, b.rotation
    axes = [Ra[:, i] for i in range(3)] + [Rb[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            c = np.cross(Ra[:, i], Rb[:, j])
            n = np.linalg.norm(c)
            if n > 1e-9:
                axes.append(c / n)
    d = b.center - a.center
    L = np.array(axes)
    ra = np.abs(L @ Ra) @ a.half_extents
    rb = np.abs(L @ Rb) @ b.half_extents
    return float(np.min(ra + rb - np.abs(L @ d)))


def collision_check(scene: Scene, tolerance: float = PENETRATION_TOL) -> tuple[bool, list[tuple[int, int, float]]]:
    boxes = scene.boxes()
    pairs = []
    for i, j in itertools.combinations(range(len(boxes)), 2):
        depth = obb_penetration(boxes[i], boxes[j])
        if depth > tolerance:
            pairs.append((i, j, depth))
    return not pairs, pairs


def _top_face(box: OrientedBox, tol: float):
    v = box.vertices()
    top = v[:, 2].max()
    return MultiPoint([tuple(p) for p in v[v[:, 2] >= top - tol][:, :2]]).convex_hull


def support_polygon(scene: Scene, index: int, contact_tol: float = CONTACT_TOL):
    """Convex hull of the contact region under object ``index`` (``None`` if no contact)."""
    boxes = scene.boxes()
    box = boxes[index]
    v = box.vertices()
    bottom = v[:, 2].min()
    base = MultiPoint([tuple(p) for p in v[v[:, 2] <= bottom + contact_tol][:, :2]]).convex_hull
    regions = []
    if bottom <= contact_tol:
        ws = scene.workspace
        regions.append(base.intersection(shapely_box(ws.x_min, ws.y_min, ws.x_max, ws.y_max)))
    for j, other in enumerate(boxes):
        if j == index:
            continue
        if abs(other.z_range()[1] - bottom) <= contact_tol:
            regions.append(base.intersection(_top_face(other, contact_tol)))
    regions = [r for r in regions if not r.is_empty]
    if not regions:
        return None
    return unary_union(regions).convex_hull


def is_supported(scene: Scene, index: int, margin: float = STABILITY_MARGIN, contact_tol: float = CONTACT_TOL) -> bool:
    poly = support_polygon(scene, index, contact_tol)
    if poly is None or poly.area <= 0:
        return False
    com = scene.objects[index].box.center
    shrunk = poly.buffer(-margin)
    return bool(not shrunk.is_empty and shrunk.contains(Point(com[0], com[1])))


def stability_check(scene: Scene, margin: float = STABILITY_MARGIN) -> tuple[bool, list[int]]:
    unstable = [i for i in range(len(scene)) if not is_supported(scene, i, margin)]
    return not unstable, unstable


def displacement_check(
    before: Scene, after: Scene, movable_index: int, threshold: float = DISPLACEMENT_TOL
) -> tuple[bool, list[tuple[int, float]]]:
    if len(before) != len(after) or any(a.model.id != b.model.id for a, b in zip(before.objects, after.objects)):
        raise SceneMismatch("scenes do not hold the same objects")
    moved = []
    for i, (a, b) in enumerate(zip(before.objects, after.objects)):
        if i == movable_index:
            continue
        dist = float(np.linalg.norm(a.pose.translation - b.pose.translation))
        if dist > threshold:
            moved.append((i, dist))
    return bool(moved), moved


def validate_placement(goal: Scene, before: Scene, movable_index: int) -> ValidityReport:
    free, pairs = collision_check(goal)
    stable, unstable = stability_check(goal)
    displaced, moved = displacement_check(before, goal, movable_index)
    return ValidityReport(free, pairs, stable, unstable, displaced, moved)


def place_and_settle(scene: Scene, index: int, pose: Pose) -> Scene:
    """Put object ``index`` at ``pose`` (lifted above the table if needed) and settle."""
    placed = scene.with_pose(index, pose)
    bottom = placed.objects[index].box.z_range()[0]
    if bottom < 0:
        t = np.array(pose.translation)
        t[2] -= bottom
        placed = placed.with_pose(index, pose.with_translation(t))
    return settle(placed)


__all__ = [
    "ValidityReport",
    "collision_check",
    "displacement_check",
    "footprint",
    "is_supported",
    "obb_penetration",
    "place_and_settle",
    "settle",
    "stability_check",
    "support_polygon",
    "validate_placement",
]
