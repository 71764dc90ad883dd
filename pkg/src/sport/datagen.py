"""Procedural placement dataset: catalog, instances, instructions, files on disk.

An instance is produced in three stages: pick the objects and their roles,
lay out and settle an initial scene, then re-place the movable object
inside the relation region and keep the result only if it is physically
valid. Instructions come from a seeded template bank that the rule-based
parser inverts exactly.
"""
from __future__ import annotations

import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyTemplateBank,
    FormatError,
    GenerationExhausted,
    NoVisiblePoints,
    RegionSamplingExhausted,
    UnknownCategory,
    UnparseableInstruction,
)
from .geometry import OrientedBox, PointCloud, Pose, footprint, partial_view, read_spcd, rot_z, write_spcd
from .physics import settle, validate_placement
from .scene import (
    DEFAULT_DELTA,
    PALETTE,
    CameraPose,
    ObjectModel,
    Relation,
    Role,
    Scene,
    SceneObject,
    Workspace,
    classify_pose,
    default_camera,
    dumps_json,
    load_catalog,
    relation_region_sample,
    save_catalog,
)

log = logging.getLogger(__name__)

DATASET_VERSION = 1

# largest extent in meters and relative (x, y, z) proportions per category
CATEGORY_TABLE: dict[str, tuple[float, tuple[float, float, float]]] = {
    "box": (0.10, (1.0, 0.8, 0.6)),
    "mug": (0.10, (0.8, 0.8, 1.0)),
    "plate": (0.16, (1.0, 1.0, 0.12)),
    "bowl": (0.14, (1.0, 1.0, 0.45)),
    "can": (0.11, (0.6, 0.6, 1.0)),
    "bottle": (0.16, (0.45, 0.45, 1.0)),
    "book": (0.15, (1.0, 0.7, 0.2)),
    "cup": (0.09, (0.8, 0.8, 1.0)),
    "jar": (0.11, (0.75, 0.75, 1.0)),
    "vase": (0.16, (0.5, 0.5, 1.0)),
    "block": (0.06, (1.0, 1.0, 1.0)),
    "tray": (0.16, (1.0, 0.7, 0.15)),
    "laptop": (0.16, (1.0, 0.7, 0.12)),
    "phone": (0.10, (1.0, 0.5, 0.1)),
    "remote": (0.12, (1.0, 0.3, 0.15)),
    "clock": (0.10, (1.0, 0.4, 1.0)),
    "lamp": (0.16, (0.6, 0.6, 1.0)),
    "speaker": (0.12, (0.7, 0.6, 1.0)),
    "candle": (0.08, (0.6, 0.6, 1.0)),
    "cube": (0.07, (1.0, 1.0, 1.0)),
    "cushion": (0.15, (1.0, 1.0, 0.35)),
    "basket": (0.16, (1.0, 0.75, 0.6)),
    "kettle": (0.14, (1.0, 0.8, 0.9)),
    "toaster": (0.15, (1.0, 0.6, 0.7)),
    "pot": (0.15, (1.0, 1.0, 0.7)),
    "pan": (0.16, (1.0, 1.0, 0.2)),
    "glass": (0.09, (0.65, 0.65, 1.0)),
    "notebook": (0.13, (1.0, 0.75, 0.12)),
    "wallet": (0.09, (1.0, 0.7, 0.2)),
    "sponge": (0.08, (1.0, 0.65, 0.4)),
}


@dataclass(frozen=True, eq=False)
class RawModel:
    """An unprocessed model: arbitrary units, arbitrary placement."""

    id: str
    category: str
    vertices: np.ndarray
    color: tuple[float, float, float]

    @classmethod
    def from_box(cls, id: str, category: str, extents, center=(0.0, 0.0, 0.0), color=(0.5, 0.5, 0.5)) -> RawModel:
        e = np.asarray(extents, dtype=np.float64) / 2.0
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return cls(id, category, signs * e + np.asarray(center, dtype=np.float64), tuple(color))


def load_obj_vertices(path) -> np.ndarray:
    """Vertex positions of a Wavefront OBJ file (the mesh-import hook)."""
    verts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("v "):
                verts.append([float(v) for v in line.split()[1:4]])
    if not verts:
        raise FormatError(f"{path}: no vertices")
    return np.asarray(verts)


def preprocess_catalog(raw_models: Iterable[RawModel], size_table: Mapping[str, float]) -> list[ObjectModel]:
    """Scale every model so its largest extent equals its category size, centered at the origin."""
    out = []
    for raw in raw_models:
        if raw.category not in size_table:
            raise UnknownCategory(raw.category)
        v = np.asarray(raw.vertices, dtype=np.float64)
        extents = v.max(0) - v.min(0)
        scale = float(size_table[raw.category]) / float(extents.max())
        out.append(ObjectModel(raw.id, raw.category, np.maximum(extents * scale / 2.0, 1e-4), raw.color))
    return out


def default_raw_models(per_category: int = 4, seed: int = 0) -> list[RawModel]:
    rng = np.random.default_rng(seed)
    colors = list(PALETTE)
    raws = []
    for ci, (cat, (_, aspect)) in enumerate(sorted(CATEGORY_TABLE.items())):
        picks = rng.choice(len(colors), size=per_category, replace=False)
        for k in range(per_category):
            jitter = rng.uniform(0.85, 1.15, size=3)
            raw_scale = rng.uniform(0.5, 20.0)
            extents = np.asarray(aspect) * jitter * raw_scale
            center = rng.normal(scale=raw_scale, size=3)
            raws.append(RawModel.from_box(f"{cat}_{k:02d}", cat, extents, center, PALETTE[colors[picks[k]]]))
    return raws


def default_catalog(per_category: int = 4, seed: int = 0) -> list[ObjectModel]:
    """The procedural 30-category catalog (120 models by default)."""
    return preprocess_catalog(default_raw_models(per_category, seed), {c: s for c, (s, _) in CATEGORY_TABLE.items()})


# --- instructions -------------------------------------------------------------

VERBS = ("put", "place", "move", "set")

DEFAULT_TEMPLATE_BANK: dict[Relation, tuple[str, ...]] = {
    Relation.LEFT: (
        "{Verb} the {m} to the left of the {r}.",
        "{Verb} the {m} on the left side of the {r}.",
        "{Verb} the {m} left of the {r}.",
        "To the left of the {r}, {verb} the {m}.",
        "Can you {verb} the {m} to the left of the {r}?",
        "{Verb} the {m} so that it ends up left of the {r}.",
    ),
    Relation.RIGHT: (
        "{Verb} the {m} to the right of the {r}.",
        "{Verb} the {m} on the right side of the {r}.",
        "{Verb} the {m} right of the {r}.",
        "To the right of the {r}, {verb} the {m}.",
        "Can you {verb} the {m} to the right of the {r}?",
        "{Verb} the {m} so that it ends up right of the {r}.",
    ),
    Relation.FRONT: (
        "{Verb} the {m} in front of the {r}.",
        "{Verb} the {m} on the front side of the {r}.",
        "In front of the {r}, {verb} the {m}.",
        "Can you {verb} the {m} in front of the {r}?",
        "{Verb} the {m} so that it ends up in front of the {r}.",
    ),
    Relation.BEHIND: (
        "{Verb} the {m} behind the {r}.",
        "{Verb} the {m} at the back of the {r}.",
        "Behind the {r}, {verb} the {m}.",
        "Can you {verb} the {m} behind the {r}?",
        "{Verb} the {m} so that it ends up behind the {r}.",
    ),
    Relation.ON_TOP_OF: (
        "{Verb} the {m} on top of the {r}.",
        "{Verb} the {m} onto the {r}.",
        "On top of the {r}, {verb} the {m}.",
        "Can you {verb} the {m} on top of the {r}?",
        "{Verb} the {m} so that it rests on the {r}.",
    ),
    Relation.BETWEEN: (
        "{Verb} the {m} between the {r1} and the {r2}.",
        "{Verb} the {m} in between the {r1} and the {r2}.",
        "Between the {r1} and the {r2}, {verb} the {m}.",
        "Can you {verb} the {m} between the {r1} and the {r2}?",
        "{Verb} the {m} midway between the {r1} and the {r2}.",
    ),
}


def fill_template(template: str, verb: str, movable: str, references: Sequence[str]) -> str:
    refs = {"r": references[0]} if len(references) == 1 else {"r1": references[0], "r2": references[1]}
    return template.format(Verb=verb.capitalize(), verb=verb, m=movable, **refs)


def generate_instruction(instance: Instance, bank: Mapping[Relation, Sequence[str]] | None = None, seed=None) -> str:
    bank = DEFAULT_TEMPLATE_BANK if bank is None else bank
    templates = bank.get(instance.relation, ())
    if not templates:
        raise EmptyTemplateBank(f"no template for {instance.relation.value}")
    rng = np.random.default_rng(seed)
    template = templates[int(rng.integers(len(templates)))]
    verb = VERBS[int(rng.integers(len(VERBS)))]
    movable, refs = instance.descriptors()
    return fill_template(template, verb, movable, refs)


def _template_regex(template: str) -> re.Pattern:
    verb = "(?:" + "|".join(VERBS) + ")"
    parts = re.split(r"(\{\w+\})", template)
    out = []
    for p in parts:
        if p in ("{Verb}", "{verb}"):
            out.append(verb)
        elif p in ("{m}", "{r}", "{r1}", "{r2}"):
            out.append(f"(?P<{p[1:-1]}>.+?)")
        else:
            out.append(r"\s+".join(re.escape(w) for w in p.split(" ")))
    return re.compile("^" + "".join(out) + r"\s*$", re.IGNORECASE)


_REGEX_CACHE: dict[str, re.Pattern] = {}


def parse_instruction(
    text: str, descriptors: Iterable[str], bank: Mapping[Relation, Sequence[str]] | None = None
) -> tuple[str, list[str], Relation]:
    """Recover ``(movable, references, relation)`` from a templated instruction.

    Captured object phrases must name one of ``descriptors``; references are
    returned in order of mention.
    """
    bank = DEFAULT_TEMPLATE_BANK if bank is None else bank
    known = {d.lower(): d for d in descriptors}
    text = text.strip()
    for relation, templates in bank.items():
        for template in templates:
            rx = _REGEX_CACHE.get(template)
            if rx is None:
                rx = _REGEX_CACHE[template] = _template_regex(template)
            m = rx.match(text)
            if not m:
                continue
            groups = m.groupdict()
            names = [groups["m"]] + ([groups["r"]] if "r" in groups else [groups["r1"], groups["r2"]])
            names = [" ".join(n.lower().split()) for n in names]
            if all(n in known for n in names) and len(set(names)) == len(names):
                return known[names[0]], [known[n] for n in names[1:]], Relation(relation)
    raise UnparseableInstruction(f"cannot parse instruction: {text!r}")


# --- instances ----------------------------------------------------------------


@dataclass
class Instance:
    id: int
    initial_scene: Scene
    goal_scene: Scene
    relation: Relation
    movable_index: int
    reference_indices: tuple[int, ...]
    instruction: str = ""
    clouds: tuple[PointCloud, ...] = ()

    def descriptors(self) -> tuple[str, list[str]]:
        objs = self.initial_scene.objects
        return objs[self.movable_index].model.descriptor, [objs[i].model.descriptor for i in self.reference_indices]

    @property
    def roles(self) -> list[Role]:
        return [o.role for o in self.initial_scene.objects]

    @property
    def goal_pose(self) -> Pose:
        return self.goal_scene.objects[self.movable_index].pose

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "relation": self.relation.value,
            "movable_index": self.movable_index,
            "reference_indices": list(self.reference_indices),
            "instruction": self.instruction,
            "initial_scene": self.initial_scene.to_dict(),
            "goal_scene": self.goal_scene.to_dict(),
            "n_clouds": len(self.clouds),
        }


@dataclass(frozen=True)
class GenConfig:
    delta: float = DEFAULT_DELTA
    radial_range: tuple[float, float] = (0.12, 0.3)
    cloud_samples: int = 512
    workspace: Workspace = field(default_factory=Workspace)
    camera: CameraPose = field(default_factory=default_camera)
    max_retries: int = 100
    min_gap: float = 0.01
    layout_tries: int = 200


class _Rejected(Exception):
    pass


def _layout_initial(models, roles, rng, cfg: GenConfig) -> Scene:
    ws = cfg.workspace
    placed: list[SceneObject] = []
    shapes = []
    for model, role in zip(models, roles):
        for _ in range(cfg.layout_tries):
            yaw = rng.uniform(-math.pi, math.pi)
            xy = rng.uniform([ws.x_min, ws.y_min], [ws.x_max, ws.y_max])
            pose = Pose.from_xyz_yaw([xy[0], xy[1], model.half_extents[2]], yaw)
            box = model.geometry.transformed(pose)
            if not ws.contains_xy(box.vertices()[:, :2], margin=cfg.min_gap).all():
                continue
            fp = footprint(box)
            if any(fp.distance(o) < cfg.min_gap for o in shapes):
                continue
            placed.append(SceneObject(model, pose, role))
            shapes.append(fp)
            break
        else:
            raise _Rejected("initial layout failed")
    return settle(Scene(tuple(placed), ws, cfg.camera))


def scene_clouds(scene: Scene, samples: int = 512, seed=None) -> tuple[PointCloud, ...]:
    """Float32 partial-view cloud of every object, with the others as occluders."""
    rng = np.random.default_rng(seed)
    boxes = scene.boxes()
    clouds = []
    for i, obj in enumerate(scene.objects):
        occluders = [b for j, b in enumerate(boxes) if j != i]
        try:
            pc = partial_view(obj.model.geometry, obj.pose, scene.camera, samples, rng, occluders, obj.model.color)
        except NoVisiblePoints as exc:
            raise NoVisiblePoints(f"object {i} not visible") from exc
        clouds.append(pc.astype(np.float32))
    return tuple(clouds)


def _attempt(catalog, relation, n_objects, rng, cfg: GenConfig, instance_id: int, bank) -> Instance:
    # (1) objects and roles
    chosen, seen = [], set()
    for k in rng.permutation(len(catalog)):
        m = catalog[int(k)]
        if m.descriptor not in seen:
            chosen.append(m)
            seen.add(m.descriptor)
        if len(chosen) == n_objects:
            break
    if len(chosen) < n_objects:
        raise ValueError("catalog has too few distinct objects")
    n_refs = relation.n_references
    roles = [Role.MOVABLE] + [Role.REFERENCE] * n_refs + [Role.IRRELEVANT] * (n_objects - 1 - n_refs)
    order = rng.permutation(n_objects)
    models = [chosen[i] for i in order]
    roles = [roles[i] for i in order]

    # (2) initial scene
    initial = _layout_initial(models, roles, rng, cfg)
    m_idx = initial.movable_index
    ref_idx = tuple(initial.indices(Role.REFERENCE))

    # (3) goal scene: only the movable object is re-placed
    boxes = initial.boxes()
    others = [b for i, b in enumerate(boxes) if i != m_idx]
    rot = rot_z(rng.uniform(-math.pi, math.pi))
    movable = OrientedBox(np.zeros(3), models[m_idx].half_extents, rot)
    try:
        center = relation_region_sample(
            relation,
            [boxes[i] for i in ref_idx],
            cfg.delta,
            cfg.radial_range,
            rng,
            movable=movable,
            supports=others,
            workspace=cfg.workspace,
        )
    except RegionSamplingExhausted as exc:
        raise _Rejected(str(exc)) from exc
    goal = settle(initial.with_pose(m_idx, Pose(center, rot)))
    goal_box = goal.objects[m_idx].box
    if relation is not Relation.ON_TOP_OF and goal_box.z_range()[0] > 1e-9:
        raise _Rejected("planar placement did not land on the table")
    if relation not in classify_pose(goal_box, [goal.objects[i].box for i in ref_idx], cfg.delta):
        raise _Rejected("settled pose left the relation region")
    report = validate_placement(goal, initial, m_idx)
    if not report.ok:
        raise _Rejected(f"invalid placement: {report.to_dict()}")

    try:
        clouds = scene_clouds(initial, cfg.cloud_samples, rng)
    except NoVisiblePoints as exc:
        raise _Rejected(str(exc)) from exc

    inst = Instance(instance_id, initial, goal, relation, m_idx, ref_idx, "", clouds)
    inst.instruction = generate_instruction(inst, bank, rng)
    return inst


def generate_instance(
    catalog: Sequence[ObjectModel],
    relation: Relation,
    n_objects: int = 4,
    seed=None,
    instance_id: int = 0,
    config: GenConfig | None = None,
    bank: Mapping[Relation, Sequence[str]] | None = None,
) -> Instance:
    """One valid (initial scene, goal scene, instruction) sample, deterministic per seed."""
    cfg = GenConfig() if config is None else config
    relation = Relation(relation)
    if not 1 + relation.n_references <= n_objects <= 10:
        raise ValueError(f"{relation.value} needs at least {1 + relation.n_references} objects")
    if len(catalog) < n_objects:
        raise ValueError("catalog has fewer models than requested objects")
    rng = np.random.default_rng(seed)
    for attempt in range(cfg.max_retries):
        try:
            return _attempt(catalog, relation, n_objects, rng, cfg, instance_id, bank)
        except _Rejected as exc:
            log.debug("instance %d attempt %d rejected: %s", instance_id, attempt, exc)
    raise GenerationExhausted(f"no valid {relation.value} instance after {cfg.max_retries} retries")


def _instance_plan(master_seed: int, index: int, relations, balanced, objects_range):
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, index, 0]))
    relation = relations[index % len(relations)] if balanced else relations[int(rng.integers(len(relations)))]
    lo, hi = objects_range
    n = 1 + relation.n_references + int(rng.integers(1, 4))
    n = int(min(max(n, lo, 1 + relation.n_references), hi))
    return relation, n, np.random.SeedSequence([master_seed, index, 1])


def _generate_one(args):
    catalog, master_seed, index, relations, balanced, objects_range, cfg = args
    relation, n, seed = _instance_plan(master_seed, index, relations, balanced, objects_range)
    return generate_instance(catalog, relation, n, seed, instance_id=index, config=cfg)


def generate_dataset(
    catalog: Sequence[ObjectModel],
    count: int,
    relations: Sequence[Relation] = tuple(Relation),
    master_seed: int = 0,
    balanced: bool = True,
    objects_range: tuple[int, int] = (3, 6),
    jobs: int = 1,
    config: GenConfig | None = None,
    start: int = 0,
) -> list[Instance]:
    """``count`` instances with ids ``start..start+count-1``.

    Each instance depends only on ``(master_seed, id)``, so the output does
    not depend on ``jobs``.
    """
    relations = [Relation(r) for r in relations]
    if not relations:
        raise ValueError("at least one relation is required")
    cfg = GenConfig() if config is None else config
    tasks = [(list(catalog), master_seed, i, relations, balanced, objects_range, cfg) for i in range(start, start + count)]
    if jobs > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_generate_one, tasks, chunksize=max(1, count // (4 * jobs))))
    return [_generate_one(t) for t in tasks]


# --- dataset files ------------------------------------------------------------


def _relation_counts(instances: Iterable[Instance]) -> dict[str, int]:
    counts = {r.value: 0 for r in Relation}
    for inst in instances:
        counts[inst.relation.value] += 1
    return counts


def write_dataset(
    path,
    instances: Sequence[Instance],
    catalog: Sequence[ObjectModel],
    master_seed: int | None = None,
    split: str = "train",
) -> dict:
    """Write ``manifest.json``, ``catalog.json``, ``instances/`` and ``clouds/``; returns the manifest."""
    root = Path(path)
    (root / "instances").mkdir(parents=True, exist_ok=True)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    save_catalog(root / "catalog.json", catalog)
    for inst in instances:
        name = f"{inst.id:06d}"
        (root / "instances" / f"{name}.json").write_text(dumps_json(inst.to_dict()), encoding="utf-8")
        for k, cloud in enumerate(inst.clouds):
            write_spcd(root / "clouds" / f"{name}_{k}.spcd", cloud)
    manifest = {
        "version": DATASET_VERSION,
        "master_seed": master_seed,
        "catalog": "catalog.json",
        "count": len(instances),
        "per_relation": _relation_counts(instances),
        "splits": {split: [inst.id for inst in instances]},
    }
    (root / "manifest.json").write_text(dumps_json(manifest), encoding="utf-8")
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{root}: no manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root}: malformed manifest") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {manifest.get('version')!r}")
    if sum(manifest["per_relation"].values()) != manifest["count"]:
        raise FormatError("per-relation counts do not sum to count")
    return manifest


def read_dataset(path) -> list[Instance]:
    root = Path(path)
    manifest = read_manifest(root)
    catalog = {m.id: m for m in load_catalog(root / manifest["catalog"])}
    files = sorted((root / "instances").glob("*.json"))
    if len(files) != manifest["count"]:
        raise FormatError(f"manifest lists {manifest['count']} instances, found {len(files)} files")
    out = []
    for f in files:
        d = json.loads(f.read_text(encoding="utf-8"))
        clouds = tuple(read_spcd(root / "clouds" / f"{f.stem}_{k}.spcd") for k in range(d["n_clouds"]))
        out.append(
            Instance(
                int(d["id"]),
                Scene.from_dict(d["initial_scene"], catalog),
                Scene.from_dict(d["goal_scene"], catalog),
                Relation(d["relation"]),
                int(d["movable_index"]),
                tuple(int(i) for i in d["reference_indices"]),
                d["instruction"],
                clouds,
            )
        )
    if _relation_counts(out) != manifest["per_relation"]:
        raise FormatError("per-relation counts disagree with instance files")
    return out


def dataset_split(path, tag: str) -> list[int]:
    return list(read_manifest(path)["splits"].get(tag, []))


def resolve_jobs(jobs: int | None) -> int:
    return max(1, jobs if jobs else (os.cpu_count() or 1))
