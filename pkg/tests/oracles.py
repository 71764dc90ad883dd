"""Independent reference implementations used to check the library.

These deliberately avoid the code paths under test: collision by point
sampling, support regions by grid sampling plus scipy hulls, noise
schedules by explicit products.
"""
import math

import numpy as np
from scipy.spatial import ConvexHull

from sport.geometry import OrientedBox, rot_z, rotation_from_vectors


def random_rotation(rng):
    return rotation_from_vectors(rng.normal(size=3), rng.normal(size=3))


def random_box_pair(rng):
    a = OrientedBox(np.zeros(3), rng.uniform(0.05, 0.5, size=3), random_rotation(rng))
    b = OrientedBox(rng.uniform(-0.9, 0.9, size=3), rng.uniform(0.05, 0.5, size=3), random_rotation(rng))
    return a, b


def mc_overlap(a: OrientedBox, b: OrientedBox, n: int = 100_000, seed: int = 0) -> bool:
    """True if any of ``n`` uniform samples inside the smaller box lies in the other."""
    small, other = (a, b) if a.volume() <= b.volume() else (b, a)
    rng = np.random.default_rng(seed)
    local = rng.uniform(-1.0, 1.0, size=(n, 3)) * small.half_extents
    pts = local @ small.rotation.T + small.center
    rel = (pts - other.center) @ other.rotation
    return bool(np.any(np.all(np.abs(rel) <= other.half_extents, axis=1)))


def stacked_pair(rng):
    """A flat box resting on a larger one with a random offset and yaw."""
    base_h = rng.uniform(0.03, 0.1, size=3)
    base = OrientedBox([0.0, 0.0, base_h[2]], base_h, rot_z(rng.uniform(-0.3, 0.3)))
    top_h = rng.uniform(0.02, 0.06, size=3)
    off = rng.uniform(-1.0, 1.0, size=2) * (base_h[:2] + top_h[:2])
    top = OrientedBox([off[0], off[1], 2 * base_h[2] + top_h[2]], top_h, rot_z(rng.uniform(-math.pi, math.pi)))
    return base, top


def grid_support_stable(base: OrientedBox, top: OrientedBox, margin: float, step: float = 5e-4):
    """Grid-sampled support-polygon oracle.

    Returns ``(stable, clearance)`` where ``clearance`` is the signed
    distance of the top box's center from the support hull boundary
    (negative outside), or ``(False, -inf)`` without a support area.
    """
    h = top.half_extents
    u = np.arange(-h[0], h[0] + step / 2, step)
    v = np.arange(-h[1], h[1] + step / 2, step)
    uu, vv = np.meshgrid(u, v)
    local = np.stack([uu.ravel(), vv.ravel(), np.full(uu.size, -h[2])], axis=1)
    pts = local @ top.rotation.T + top.center
    rel = (pts - base.center) @ base.rotation
    inside = np.all(np.abs(rel[:, :2]) <= base.half_extents[:2], axis=1)
    xy = pts[inside, :2]
    if len(xy) < 3:
        return False, -np.inf
    try:
        hull = ConvexHull(xy)
    except Exception:
        return False, -np.inf
    c = top.center[:2]
    # hull.equations: n.x + d <= 0 inside, with unit normals
    dist = -(hull.equations[:, :2] @ c + hull.equations[:, 2])
    clearance = float(dist.min())
    return clearance > margin, clearance


def alpha_bar_direct(betas, t):
    """Product of (1 - beta_s) for s = 1..t, multiplied out one factor at a time."""
    p = 1.0
    for s in range(1, t + 1):
        p = p * (1.0 - betas[s - 1])
    return p
