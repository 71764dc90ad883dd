"""
Poses, boxes and partial-view point clouds
==========================================

A rotation is stored through its first two columns and recovered with
Gram-Schmidt. Objects are oriented boxes; the camera sees only the faces
turned towards it, and farthest-point sampling thins the visible points to a
fixed budget.
"""
import numpy as np

from sport.geometry import OrientedBox, Pose, farthest_point_sample, obb_from_cloud, partial_view, rot_z, rotation_from_vectors
from sport.scene import default_camera

# two arbitrary 3-vectors always give a proper rotation
R = rotation_from_vectors([1.0, 0.2, 0.0], [0.3, 1.0, 0.5])
print("det R =", round(float(np.linalg.det(R)), 12))
print("columns recovered:", np.allclose(rotation_from_vectors(R[:, 0], R[:, 1]), R))

# a 10 x 6 x 4 cm box, turned 30 degrees and resting on the table
box = OrientedBox(np.zeros(3), [0.05, 0.03, 0.02])
pose = Pose([0.05, 0.02, 0.02], rot_z(np.radians(30)))

camera = default_camera()
cloud = partial_view(box, pose, camera, samples=2000, seed=0)
print(f"{len(cloud)} of 2000 surface samples are visible from the camera")


sparse = farthest_point_sample(cloud, 64, seed=0)
print("after farthest-point sampling:", len(sparse), "points")

# a box fitted to the visible points is upright and roughly the right size
fit = obb_from_cloud(cloud)
print("fitted half extents:", np.round(np.sort(fit.half_extents)[::-1], 3))
