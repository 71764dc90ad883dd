"""Rigid transforms, point clouds, oriented boxes and partial-view synthesis.

Conventions used throughout the package:

* vectors are ``numpy`` arrays of shape ``(3,)``; clouds are ``(N, 3)``;
* a :class:`Pose` maps object-frame points into the world frame,
  ``p_world = R @ p_obj + s``;
* cameras follow the OpenCV convention (x right, y down, z forward) and
  a :class:`CameraPose` stores the camera-to-world transform.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull
from shapely.geometry import MultiPoint, Polygon

from .errors import DegenerateRotation, EmptyCloud, FormatError, NoVisiblePoints

MIN_HALF_EXTENT = 1e-4


def _vec(v) -> np.ndarray:
    a = np.array(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite vector {a}")
    return a


def rotation_from_vectors(a, b) -> np.ndarray:
    """Build a rotation matrix whose first two columns span ``a`` and ``b``.

    Gram-Schmidt: the first column is ``a`` normalized, the second is the
    component of ``b`` orthogonal to it, the third is their cross product.
    """
    a = np.asarray(a, dtype=np.float64).reshape(3)
    b = np.asarray(b, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DegenerateRotation("non-finite input vectors")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= 1e-8 or nb <= 1e-8:
        raise DegenerateRotation(f"vector too short (|a|={na:.3g}, |b|={nb:.3g})")
    c0 = a / na
    if np.linalg.norm(np.cross(c0, b / nb)) <= 1e-6:
        raise DegenerateRotation("a and b are parallel")
    c1 = b - np.dot(b, c0) * c0
    c1 /= np.linalg.norm(c1)
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=1)


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(R, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``(s, R)``: translation in meters and a rotation matrix."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        t = _vec(self.translation)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not is_rotation(R):
            raise DegenerateRotation("rotation is not in SO(3)")
        t.setflags(write=False)
        R = R.copy()
        R.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", R)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_xyz_yaw(cls, xyz, yaw: float = 0.0) -> Pose:
        return cls(np.asarray(xyz, dtype=np.float64), rot_z(yaw))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> Pose:
        """Inverse of :meth:`to_list` (3 translation + 9 row-major rotation floats)."""
        if len(values) != 12:
            raise ValueError(f"expected 12 floats, got {len(values)}")
        return cls(np.array(values[:3], dtype=np.float64), np.array(values[3:], dtype=np.float64).reshape(3, 3))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.translation] + [float(v) for v in self.rotation.reshape(-1)]

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(-Rt @ self.translation, Rt)

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.translation + self.translation, self.rotation @ other.rotation)

    def with_translation(self, translation) -> Pose:
        return Pose(np.asarray(translation, dtype=np.float64), self.rotation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.translation, other.translation) and np.array_equal(self.rotation, other.rotation))

    def __repr__(self):
        t = ", ".join(f"{v:.4g}" for v in self.translation)
        return f"Pose(t=({t}))"


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points)
        if pts.dtype not in (np.float32, np.float64):
            pts = pts.astype(np.float64)
        pts = pts.reshape(-1, 3)
        if self.colors is not None:
            cols = np.array(self.colors, dtype=pts.dtype).reshape(-1, 3)
            if len(cols) != len(pts):
                raise ValueError(f"{len(cols)} colors for {len(pts)} points")
            cols.setflags(write=False)
            object.__setattr__(self, "colors", cols)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def has_color(self) -> bool:
        return self.colors is not None

    def astype(self, dtype) -> PointCloud:
        cols = None if self.colors is None else self.colors.astype(dtype)
        return PointCloud(self.points.astype(dtype), cols)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.has_color != other.has_color:
            return False
        same = np.array_equal(self.points, other.points)
        if self.has_color:
            same = same and np.array_equal(self.colors, other.colors)
        return bool(same)


@dataclass(frozen=True, eq=False)
class OrientedBox:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        c = _vec(self.center)
        h = _vec(self.half_extents)
        if np.any(h <= 0):
            raise ValueError(f"half extents must be positive, got {h}")
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not is_rotation(R):
            raise DegenerateRotation("box rotation is not in SO(3)")
        for a in (c, h):
            a.setflags(write=False)
        R = R.copy()
        R.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "rotation", R)

    @property
    def pose(self) -> Pose:
        return Pose(self.center, self.rotation)

    def transformed(self, pose: Pose) -> OrientedBox:
        return OrientedBox(pose.apply(self.center), self.half_extents, pose.rotation @ self.rotation)

    def vertices(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return (signs * self.half_extents) @ self.rotation.T + self.center

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        local = self.to_local(np.atleast_2d(points))
        return np.all(np.abs(local) <= self.half_extents + tol, axis=-1)

    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def z_range(self) -> tuple[float, float]:
        # |R| @ h gives the world-axis half spans of the box
        span = np.abs(self.rotation) @ self.half_extents
        return float(self.center[2] - span[2]), float(self.center[2] + span[2])

    def __eq__(self, other):
        if not isinstance(other, OrientedBox):
            return NotImplemented
        return bool(
            np.array_equal(self.center, other.center)
            and np.array_equal(self.half_extents, other.half_extents)
            and np.array_equal(self.rotation, other.rotation)
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    pose: Pose
    focal: float = 110.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> CameraPose:
        eye, target, up = _vec(eye), _vec(target), _vec(up)
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(Pose(eye, np.stack([right, down, fwd], axis=1)), **intrinsics)

    def intrinsics(self) -> list[float]:
        return [float(self.focal), float(self.width), float(self.height)]

    def project(self, points_world) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return pixel columns ``u``, rows ``v`` and camera-frame depth ``z``."""
        cam = self.pose.inverse().apply(points_world)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * cam[:, 0] / z + self.width / 2.0
            v = self.focal * cam[:, 1] / z + self.height / 2.0
        return u, v, z

    def pixel_rays(self) -> np.ndarray:
        """World-frame ray directions through every pixel center, scaled to unit camera depth."""
        jj, ii = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack(
            [(jj - self.width / 2.0) / self.focal, (ii - self.height / 2.0) / self.focal, np.ones_like(jj)], axis=-1
        )
        return d.reshape(-1, 3) @ self.pose.rotation.T

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (self.pose, self.focal, self.width, self.height) == (other.pose, other.focal, other.width, other.height)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    if len(cloud) == 0:
        raise EmptyCloud("cannot transform an empty cloud")
    return PointCloud(pose.apply(cloud.points), cloud.colors)


def ray_box_depth(origin, directions: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Slab test; returns the ray parameter of the first hit (``inf`` on a miss)."""
    o = box.to_local(np.asarray(origin, dtype=np.float64)[None])[0]
    d = directions @ box.rotation
    h = box.half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - o) / d
        t2 = (h - o) / d
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside the slab -> unconstrained, outside -> miss
    par = d == 0
    inside = np.abs(o) <= h
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    hit = tmax >= np.maximum(tmin, 0.0)
    return np.where(hit, np.maximum(tmin, 0.0), np.inf)


def depth_buffer(camera: CameraPose, boxes: Iterable[OrientedBox]) -> np.ndarray:
    """Per-pixel depth of the nearest box surface, shape ``(height, width)``."""
    rays = camera.pixel_rays()
    zbuf = np.full(len(rays), np.inf)
    for box in boxes:
        zbuf = np.minimum(zbuf, ray_box_depth(camera.pose.translation, rays, box))
    return zbuf.reshape(camera.height, camera.width)


def sample_box_surface(box: OrientedBox, samples: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples on the box faces; returns ``(points, outward normals)``."""
    rng = np.random.default_rng(seed)
    h = box.half_extents
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    counts = rng.multinomial(samples, areas / areas.sum())
    pts, normals = [], []
    for face, n in enumerate(counts):
        axis, sign = divmod(face, 2)
        sign = 1.0 if sign else -1.0
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
        local[:, axis] = sign * h[axis]
        normal = np.zeros((n, 3))
        normal[:, axis] = sign
        pts.append(local)
        normals.append(normal)
    local = np.concatenate(pts)
    normal = np.concatenate(normals)
    return local @ box.rotation.T + box.center, normal @ box.rotation.T


def visible_mask(
    points: np.ndarray,
    normals: np.ndarray,
    camera: CameraPose,
    occluders: Sequence[OrientedBox] = (),
    rel_tol: float = 1e-6,
) -> np.ndarray:
    """Which surface samples a camera sees.

    Self-occlusion of a convex box reduces to back-face culling; other boxes
    occlude through a z-buffer rendered at the camera pixel grid.
    """
    eye = camera.pose.translation
    facing = np.einsum("ij,ij->i", normals, eye - points) > 0
    u, v, z = camera.project(points)
    in_front = z > 1e-9
    with np.errstate(invalid="ignore"):
        in_image = (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    mask = facing & in_front & in_image
    if occluders and mask.any():
        zbuf = depth_buffer(camera, occluders)
        cols = np.clip(np.floor(u[mask]).astype(int), 0, camera.width - 1)
        rows = np.clip(np.floor(v[mask]).astype(int), 0, camera.height - 1)
        front = zbuf[rows, cols]
        unoccluded = z[mask] <= front * (1.0 + rel_tol)
        mask[np.flatnonzero(mask)] = unoccluded
    return mask


def partial_view(
    box: OrientedBox,
    pose: Pose,
    camera: CameraPose,
    samples: int = 512,
    seed=None,
    occluders: Sequence[OrientedBox] = (),
    color=None,
) -> PointCloud:
    """World-frame surface points of ``box`` (placed at ``pose``) visible from ``camera``."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    world = box.transformed(pose)
    if world.contains(camera.pose.translation[None])[0]:
        raise ValueError("camera is inside the object")
    pts, normals = sample_box_surface(world, samples, seed)
    mask = visible_mask(pts, normals, camera, occluders)
    if not mask.any():
        raise NoVisiblePoints("object is fully occluded or outside the view")
    kept = pts[mask]
    colors = None if color is None else np.tile(np.asarray(color, dtype=np.float64), (len(kept), 1))
    return PointCloud(kept, colors)


def farthest_point_sample(cloud: PointCloud, n: int, seed=None, start: int | None = None) -> PointCloud:
    """Greedy farthest-point subsampling to exactly ``n`` points.

    Points are first put in lexicographic order so the result depends only on
    the multiset of input points and the seed. ``start`` indexes that order.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot sample an empty cloud")
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = cloud.points
    m = len(pts)
    if n >= m:
        idx = np.arange(n) % m
    else:
        order = np.lexsort(pts.T[::-1])
        sorted_pts = pts[order].astype(np.float64)
        first = int(np.random.default_rng(seed).integers(m)) if start is None else int(start)
        chosen = [first]
        dist = np.sum((sorted_pts - sorted_pts[first]) ** 2, axis=1)
        for _ in range(n - 1):
            nxt = int(np.argmax(dist))
            chosen.append(nxt)
            dist = np.minimum(dist, np.sum((sorted_pts - sorted_pts[nxt]) ** 2, axis=1))
        idx = order[np.array(chosen)]
    colors = None if cloud.colors is None else cloud.colors[idx]
    return PointCloud(pts[idx], colors)


def _min_area_yaw(xy: np.ndarray) -> float:
    """Yaw of the minimum-area enclosing rectangle (rotating-calipers candidates)."""
    try:
        hull = xy[ConvexHull(xy).vertices]
    except Exception:
        return 0.0
    best, best_yaw = np.inf, 0.0
    edges = np.roll(hull, -1, axis=0) - hull
    for e in edges:
        yaw = math.atan2(e[1], e[0])
        R = rot_z(-yaw)[:2, :2]
        p = xy @ R.T
        area = np.prod(p.max(0) - p.min(0))
        if area < best:
            best, best_yaw = area, yaw
    return best_yaw


def _box_for_axes(pts: np.ndarray, R: np.ndarray) -> OrientedBox:
    local = pts @ R
    lo, hi = local.min(0), local.max(0)
    center = R @ ((lo + hi) / 2.0)
    half = np.maximum((hi - lo) / 2.0, MIN_HALF_EXTENT)
    return OrientedBox(center, half, R)


def obb_from_cloud(cloud: PointCloud) -> OrientedBox:
    """Tight-ish oriented box around a cloud.

    Candidates are a yaw-only minimum-area rectangle (objects rest on a
    table) and the PCA frame; the smaller volume wins. Fewer than four or
    coplanar points fall back to an axis-aligned box.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot fit a box to an empty cloud")
    pts = np.asarray(cloud.points, dtype=np.float64)
    centered = pts - pts.mean(0)
    sv = np.linalg.svd(centered, compute_uv=False) if len(pts) > 1 else np.zeros(3)
    if len(pts) < 4 or len(sv) < 3 or sv[2] <= 1e-9 * max(sv[0], 1e-300):
        return _box_for_axes(pts, np.eye(3))
    candidates = [_box_for_axes(pts, rot_z(_min_area_yaw(pts[:, :2])))]
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    R = vt.T.copy()
    if np.linalg.det(R) < 0:
        R[:, 2] *= -1
    candidates.append(_box_for_axes(pts, R))
    return min(candidates, key=OrientedBox.volume)


def footprint(box: OrientedBox) -> Polygon:
    """Convex hull of the box's vertical projection onto the table plane."""
    return MultiPoint([tuple(v) for v in box.vertices()[:, :2]]).convex_hull


def resting_height(box: OrientedBox, supports: Iterable[OrientedBox], snap: float = 0.0) -> float:
    """Height at which ``box`` comes to rest when dropped straight down.

    A support counts when its footprint overlaps the box footprint with
    positive area and its top is no higher than the box bottom plus ``snap``.
    The table (z = 0) is always a support.
    """
    bottom = box.z_range()[0]
    fp = footprint(box)
    level = 0.0
    for other in supports:
        top = other.z_range()[1]
        if top <= level or top > bottom + snap:
            continue
        if fp.intersection(footprint(other)).area > 1e-10:
            level = top
    return level


# --- SPCD binary point-cloud format -------------------------------------------

SPCD_MAGIC = b"SPCD"
SPCD_VERSION = 1
_SPCD_HEADER = struct.Struct("<4sIIB")


def dump_spcd(cloud: PointCloud, fh: BinaryIO) -> None:
    fh.write(_SPCD_HEADER.pack(SPCD_MAGIC, SPCD_VERSION, len(cloud), 1 if cloud.has_color else 0))
    fh.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
    if cloud.has_color:
        fh.write(np.ascontiguousarray(cloud.colors, dtype="<f4").tobytes())


def load_spcd(fh: BinaryIO) -> PointCloud:
    head = fh.read(_SPCD_HEADER.size)
    if len(head) < _SPCD_HEADER.size:
        raise FormatError("truncated SPCD header")
    magic, version, count, has_color = _SPCD_HEADER.unpack(head)
    if magic != SPCD_MAGIC:
        raise FormatError(f"bad SPCD magic {magic!r}")
    if version != SPCD_VERSION:
        raise FormatError(f"unsupported SPCD version {version}")
    if has_color not in (0, 1):
        raise FormatError(f"bad has_color flag {has_color}")
    nbytes = count * 3 * 4
    blocks = []
    for _ in range(1 + has_color):
        raw = fh.read(nbytes)
        if len(raw) != nbytes:
            raise FormatError("truncated SPCD payload")
        blocks.append(np.frombuffer(raw, dtype="<f4").reshape(count, 3).astype(np.float32))
    if fh.read(1):
        raise FormatError("trailing bytes after SPCD payload")
    return PointCloud(blocks[0], blocks[1] if has_color else None)


def write_spcd(path, cloud: PointCloud) -> None:
    with open(path, "wb") as fh:
        dump_spcd(cloud, fh)


def read_spcd(path) -> PointCloud:
    with open(path, "rb") as fh:
        return load_spcd(fh)


def spcd_bytes(cloud: PointCloud) -> bytes:
    buf = io.BytesIO()
    dump_spcd(cloud, buf)
    return buf.getvalue()
