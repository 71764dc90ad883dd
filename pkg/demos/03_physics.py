"""
Collision, settling and stability
=================================

Collisions use the separating-axis test on oriented boxes. Settling drops
every object straight down until it rests on the table or on another box.
An object is stable when its center of mass projects inside the support
polygon, shrunk by a small margin.
"""
from sport.geometry import Pose
from sport.physics import collision_check, obb_penetration, place_and_settle, stability_check, validate_placement
from sport.scene import ObjectModel, Scene, SceneObject

base = ObjectModel("base", "box", [0.1, 0.1, 0.1], (0.6, 0.4, 0.2))
cube = ObjectModel("cube", "box", [0.03, 0.03, 0.03], (0.2, 0.4, 0.8))
scene = Scene((SceneObject(base, Pose.from_xyz_yaw([0, 0, 0.1])), SceneObject(cube, Pose.from_xyz_yaw([0.3, 0, 0.03]))))

print("initial scene collision-free:", collision_check(scene)[0])

# drop the cube from above onto the base
stacked = place_and_settle(scene, 1, Pose.from_xyz_yaw([0.02, 0.0, 0.5], 0.4))
print("cube settles at z =", round(float(stacked.objects[1].pose.translation[2]), 4))
print("stable:", stability_check(stacked)[0])
print("report:", validate_placement(stacked, scene, 1).to_dict())

# most of the footprint hanging over the edge topples it
overhang = place_and_settle(scene, 1, Pose.from_xyz_yaw([0.12, 0.0, 0.5]))
print("overhanging cube stable:", stability_check(overhang)[0])

# pushed into the base, the boxes overlap by 2 cm
inside = scene.with_pose(1, Pose.from_xyz_yaw([0.11, 0.0, 0.05]))
print("penetration depth:", round(obb_penetration(inside.objects[0].box, inside.objects[1].box), 4))
