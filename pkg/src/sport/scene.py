"""Object models, scenes, roles and the spatial-relation regions."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import RegionSamplingExhausted, ZeroDistance
from .geometry import CameraPose, OrientedBox, Pose, resting_height

DEFAULT_DELTA = 0.4
ON_TOP_SLACK = 0.02
_EPS_R = 1e-12

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.2, 0.7, 0.25),
    "blue": (0.2, 0.3, 0.85),
    "yellow": (0.95, 0.85, 0.2),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.55, 0.25, 0.7),
    "white": (0.95, 0.95, 0.95),
    "black": (0.1, 0.1, 0.1),
    "gray": (0.5, 0.5, 0.5),
    "brown": (0.5, 0.32, 0.18),
    "pink": (0.95, 0.6, 0.75),
    "cyan": (0.2, 0.8, 0.85),
}


def color_name(rgb) -> str:
    rgb = np.asarray(rgb, dtype=np.float64)
    return min(PALETTE, key=lambda k: float(np.sum((np.asarray(PALETTE[k]) - rgb) ** 2)))


class Role(str, enum.Enum):
    MOVABLE = "movable"
    REFERENCE = "reference"
    IRRELEVANT = "irrelevant"


class Relation(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    FRONT = "front"
    BEHIND = "behind"
    ON_TOP_OF = "on_top_of"
    BETWEEN = "between"

    @property
    def n_references(self) -> int:
        return 2 if self is Relation.BETWEEN else 1

    @classmethod
    def parse(cls, name: str) -> Relation:
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"ontopof": "on_top_of", "on_top": "on_top_of", "top": "on_top_of", "behind_of": "behind"}
        return cls(aliases.get(key, key))


# planar relations: (axis index in the reference frame, sign of that axis)
_CONES = {
    Relation.LEFT: (0, -1.0),
    Relation.RIGHT: (0, 1.0),
    Relation.FRONT: (1, -1.0),
    Relation.BEHIND: (1, 1.0),
}


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """A catalog entry. The box proxy is centered at the origin in its canonical pose."""

    id: str
    category: str
    half_extents: np.ndarray
    color: tuple[float, float, float]

    def __post_init__(self):
        h = np.array(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise ValueError(f"model {self.id}: non-positive extents {h}")
        h.setflags(write=False)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))

    @property
    def geometry(self) -> OrientedBox:
        return OrientedBox(np.zeros(3), self.half_extents)

    @property
    def canonical_size(self) -> np.ndarray:
        return 2.0 * self.half_extents

    @property
    def descriptor(self) -> str:
        return f"{color_name(self.color)} {self.category}"

    def to_dict(self) -> dict:
        return {"id": self.id, "category": self.category, "half_extents": [float(v) for v in self.half_extents], "rgb": list(self.color)}

    @classmethod
    def from_dict(cls, d: dict) -> ObjectModel:
        return cls(d["id"], d["category"], np.array(d["half_extents"], dtype=np.float64), tuple(d["rgb"]))

    def __eq__(self, other):
        if not isinstance(other, ObjectModel):
            return NotImplemented
        return (self.id, self.category, self.color) == (other.id, other.category, other.color) and bool(
            np.array_equal(self.half_extents, other.half_extents)
        )


@dataclass(frozen=True)
class SceneObject:
    model: ObjectModel
    pose: Pose
    role: Role = Role.IRRELEVANT

    @property
    def box(self) -> OrientedBox:
        return self.model.geometry.transformed(self.pose)


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned table region; the table surface is z = 0."""

    x_min: float = -0.4
    x_max: float = 0.4
    y_min: float = -0.3
    y_max: float = 0.3
    z_max: float = 0.3

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.z_max > 0):
            raise ValueError("workspace extents must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2, self.z_max / 2])

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([(self.x_max - self.x_min) / 2, (self.y_max - self.y_min) / 2, self.z_max / 2])

    def contains_xy(self, xy, margin: float = 0.0) -> np.ndarray:
        xy = np.atleast_2d(xy)
        return (
            (xy[:, 0] >= self.x_min + margin)
            & (xy[:, 0] <= self.x_max - margin)
            & (xy[:, 1] >= self.y_min + margin)
            & (xy[:, 1] <= self.y_max - margin)
        )

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max, "z_max": self.z_max}


def default_camera() -> CameraPose:
    return CameraPose.look_at((0.0, -0.75, 0.6), (0.0, 0.0, 0.0), focal=110.0, width=128, height=128)


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    workspace: Workspace = field(default_factory=Workspace)
    camera: CameraPose = field(default_factory=default_camera)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not 2 <= len(self.objects) <= 10:
            raise ValueError(f"a scene holds 2..10 objects, got {len(self.objects)}")

    def __len__(self):
        return len(self.objects)

    def boxes(self) -> list[OrientedBox]:
        return [o.box for o in self.objects]

    def indices(self, role: Role) -> list[int]:
        return [i for i, o in enumerate(self.objects) if o.role is role]

    @property
    def movable_index(self) -> int:
        idx = self.indices(Role.MOVABLE)
        if len(idx) != 1:
            raise ValueError(f"expected exactly one movable object, found {len(idx)}")
        return idx[0]

    def with_pose(self, index: int, pose: Pose) -> Scene:
        objs = list(self.objects)
        objs[index] = replace(objs[index], pose=pose)
        return replace(self, objects=tuple(objs))

    def with_roles(self, roles: Sequence[Role]) -> Scene:
        if len(roles) != len(self.objects):
            raise ValueError("one role per object required")
        return replace(self, objects=tuple(replace(o, role=Role(r)) for o, r in zip(self.objects, roles)))

    def to_dict(self) -> dict:
        return {
            "workspace": self.workspace.to_dict(),
            "camera": camera_to_dict(self.camera),
            "objects": [{"model": o.model.id, "pose": o.pose.to_list(), "role": o.role.value} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict, catalog: dict[str, ObjectModel]) -> Scene:
        objs = []
        for rec in d["objects"]:
            if rec["model"] not in catalog:
                raise KeyError(f"scene references unknown model {rec['model']!r}")
            objs.append(SceneObject(catalog[rec["model"]], Pose.from_list(rec["pose"]), Role(rec.get("role", "irrelevant"))))
        return cls(tuple(objs), Workspace(**d["workspace"]), camera_from_dict(d["camera"]))


def camera_to_dict(cam: CameraPose) -> dict:
    return {"pose": cam.pose.to_list(), "focal": float(cam.focal), "width": int(cam.width), "height": int(cam.height)}


def camera_from_dict(d: dict) -> CameraPose:
    return CameraPose(Pose.from_list(d["pose"]), float(d["focal"]), int(d["width"]), int(d["height"]))


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def save_catalog(path, models: Iterable[ObjectModel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json([m.to_dict() for m in models]))


def load_catalog(path) -> list[ObjectModel]:
    with open(path, encoding="utf-8") as fh:
        return [ObjectModel.from_dict(d) for d in json.load(fh)]


def save_scene(path, scene: Scene) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(scene.to_dict()))


def load_scene(path, catalog: Iterable[ObjectModel]) -> Scene:
    with open(path, encoding="utf-8") as fh:
        return Scene.from_dict(json.load(fh), {m.id: m for m in catalog})


# --- relation regions ---------------------------------------------------------


def _as_box(ref) -> OrientedBox:
    if isinstance(ref, OrientedBox):
        return ref
    if isinstance(ref, Pose):
        # a bare pose is a point-like reference
        return OrientedBox(ref.translation, np.full(3, 1e-4), ref.rotation)
    raise TypeError(f"reference must be an OrientedBox or Pose, got {type(ref).__name__}")


def _check_refs(relation: Relation, refs) -> list[OrientedBox]:
    refs = [_as_box(r) for r in refs]
    if len(refs) != relation.n_references:
        raise ValueError(f"{relation.value} needs {relation.n_references} reference(s), got {len(refs)}")
    return refs


def relation_region_contains(relation: Relation, references, query, delta: float = DEFAULT_DELTA) -> bool:
    """Whether ``query`` lies in the region of ``relation`` w.r.t. ``references``.

    ``references`` are oriented boxes (or bare poses). For the planar
    relations the query is expressed in the reference frame and tested
    against a cone around the relation axis. For ``ON_TOP_OF`` the query's z
    is the height of the movable object's lowest point.
    """
    relation = Relation(relation)
    refs = _check_refs(relation, references)
    q = np.asarray(query, dtype=np.float64).reshape(3)
    if relation is Relation.BETWEEN:
        a, b = refs[0].center[:2], refs[1].center[:2]
        span = float(np.linalg.norm(b - a))
        return bool(np.linalg.norm(q[:2] - (a + b) / 2.0) <= delta * span and span > 0)
    ref = refs[0]
    local = ref.to_local(q[None])[0]
    if relation is Relation.ON_TOP_OF:
        top = ref.z_range()[1]
        h = ref.half_extents
        return bool(abs(local[0]) <= h[0] and abs(local[1]) <= h[1] and top <= q[2] + 1e-9 and q[2] <= top + ON_TOP_SLACK)
    r = math.hypot(local[0], local[1])
    if r < _EPS_R:
        raise ZeroDistance("query coincides with the reference origin")
    axis, sign = _CONES[relation]
    along = sign * local[axis] / r
    across = abs(local[1 - axis]) / r
    return bool(along > delta and across < delta)


def classify_pose(movable: OrientedBox, references, delta: float = DEFAULT_DELTA) -> set[Relation]:
    """All relations whose region holds the movable object.

    Single-reference relations use the first reference; ``BETWEEN`` is only
    evaluated when two references are given.
    """
    refs = [_as_box(r) for r in references]
    c = movable.center
    query = np.array([c[0], c[1], movable.z_range()[0]])
    found = set()
    for rel in Relation:
        if rel is Relation.BETWEEN:
            if len(refs) < 2:
                continue
            chosen = refs[:2]
        else:
            chosen = refs[:1]
        try:
            if relation_region_contains(rel, chosen, query, delta):
                found.add(rel)
        except ZeroDistance:
            pass
    return found


def relation_region_sample(
    relation: Relation,
    references,
    delta: float = DEFAULT_DELTA,
    radial_range: tuple[float, float] = (0.12, 0.3),
    rng=None,
    movable: OrientedBox | None = None,
    supports: Sequence[OrientedBox] = (),
    workspace: Workspace | None = None,
    max_attempts: int = 10_000,
) -> np.ndarray:
    """Rejection-sample a movable-object center inside the relation region.

    ``movable`` is the object's box with the desired rotation (its center is
    ignored); the returned z puts its lowest point at the resting height
    over ``supports`` and the table. Without ``movable`` the returned point's
    z is the resting height itself.
    """
    relation = Relation(relation)
    refs = _check_refs(relation, references)
    r_min, r_max = radial_range
    if not r_min < r_max:
        raise ValueError("radial range must satisfy r_min < r_max")
    rng = np.random.default_rng(rng)
    if movable is None:
        movable, lift = OrientedBox(np.zeros(3), np.full(3, 1e-4)), 0.0
    else:
        lift = movable.center[2] - movable.z_range()[0]
    for _ in range(max_attempts):
        if relation is Relation.BETWEEN:
            a, b = refs[0].center[:2], refs[1].center[:2]
            radius = delta * float(np.linalg.norm(b - a))
            rr = radius * math.sqrt(rng.uniform())
            phi = rng.uniform(-math.pi, math.pi)
            xy = (a + b) / 2.0 + rr * np.array([math.cos(phi), math.sin(phi)])
        elif relation is Relation.ON_TOP_OF:
            ref = refs[0]
            local = np.array([rng.uniform(-1, 1) * ref.half_extents[0], rng.uniform(-1, 1) * ref.half_extents[1], 0.0])
            xy = ref.pose.apply(local[None])[0][:2]
        else:
            ref = refs[0]
            rr = rng.uniform(r_min, r_max)
            phi = rng.uniform(-math.pi, math.pi)
            local = np.array([rr * math.cos(phi), rr * math.sin(phi), 0.0])
            xy = (ref.center + ref.rotation @ local)[:2]
        placed = OrientedBox(np.array([xy[0], xy[1], 10.0]), movable.half_extents, movable.rotation)
        if workspace is not None and not workspace.contains_xy(placed.vertices()[:, :2]).all():
            continue
        # planar regions ignore z, so reject before the (costlier) drop test
        if relation is not Relation.ON_TOP_OF and not _contains_or_false(relation, refs, (xy[0], xy[1], 0.0), delta):
            continue
        level = resting_height(placed, supports, snap=np.inf)
        if _contains_or_false(relation, refs, (xy[0], xy[1], level), delta):
            return np.array([xy[0], xy[1], level + lift])
    raise RegionSamplingExhausted(f"no {relation.value} sample found in {max_attempts} attempts")


def _contains_or_false(relation, refs, query, delta) -> bool:
    try:
        return relation_region_contains(relation, refs, query, delta)
    except ZeroDistance:
        return False
