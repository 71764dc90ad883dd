"""
Spatial relations as regions
============================

Each relation is a region around the reference object(s): a cone in the
reference frame for left/right/front/behind, the top face for on-top-of and
a disc around the midpoint for between. Sampling and testing use the same
predicate, so every sample lies in its region.
"""
import numpy as np

from sport.geometry import OrientedBox, Pose, rot_z
from sport.scene import Relation, classify_pose, relation_region_contains, relation_region_sample

ref = OrientedBox([0.0, 0.0, 0.05], [0.04, 0.04, 0.05], rot_z(np.radians(20)))
rng = np.random.default_rng(0)

for rel in (Relation.LEFT, Relation.RIGHT, Relation.FRONT, Relation.BEHIND):
    p = relation_region_sample(rel, [ref], rng=rng)
    print(f"{rel.value:>7}: sample {np.round(p, 3)} contained={relation_region_contains(rel, [ref], p)}")

top = relation_region_sample(Relation.ON_TOP_OF, [ref], rng=rng, supports=[ref])
print("on_top_of sample z (top of reference is 0.10):", round(float(top[2]), 4))

a = OrientedBox([-0.15, 0.0, 0.05], [0.04, 0.04, 0.05])
b = OrientedBox([0.15, 0.0, 0.05], [0.04, 0.04, 0.05])
mid = relation_region_sample(Relation.BETWEEN, [a, b], rng=rng)
print("between sample:", np.round(mid, 3))

# classify_pose reports every relation a placed box satisfies
small = OrientedBox([-0.2, 0.0, 0.02], [0.02, 0.02, 0.02])
print("box at x=-0.2 relative to ref:", sorted(r.value for r in classify_pose(small, [ref])))
