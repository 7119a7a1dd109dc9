"""Pose algebra and the geometric metrics used throughout evaluation.

Run: python3 demos/01_geometry.py
"""

import numpy as np

from cass import geom3d as g3
from cass.geom3d import OrientedBox, Pose
from cass.shapegen import get_category, sample_instance

rng = np.random.default_rng(0)

# A rotation about z by 30 deg, then a small tilt.
spin = Pose.from_axis_angle([0, 0, 1], np.radians(30))
tilt = Pose.from_axis_angle([1, 0, 0], np.radians(4), t=[0.01, 0, 0])
pred = spin.compose(tilt)
print("rotation error, ordinary   :", round(g3.rotation_error(pred, Pose.identity()), 3), "deg")

# For a symmetric object only the tilt of the symmetry axis counts.
print("rotation error, symmetric  :",
      round(g3.rotation_error(pred, Pose.identity(), symmetry_axis=[0, 0, 1]), 3), "deg")
print("translation error          :", round(100 * g3.translation_error(pred, Pose.identity()), 3), "cm")

# Chamfer and EMD between two bottles of the same category.
bottle = get_category("bottle")
a = sample_instance(bottle, seed=1).canonical.points
b = sample_instance(bottle, seed=2).canonical.points
print(f"bottle vs bottle  CD {g3.chamfer(a, b):.4f} m   EMD {g3.emd(a, b):.4f} m")
print(f"bottle vs itself  CD {g3.chamfer(a, a):.4f} m   EMD {g3.emd(a, a):.4f} m")

# Oriented box IoU: a 4 deg yaw error on a 10 cm cube.
box = OrientedBox(np.zeros(3), [0.05, 0.05, 0.05], [1, 0, 0, 0])   # half extents
yawed = OrientedBox(np.zeros(3), [0.05, 0.05, 0.05], g3.axis_angle_to_quat([0, 0, 1], np.radians(4)))
print(f"IoU, 4 deg yaw    {g3.box_iou_3d(box, yawed, samples=200_000):.3f}")
shifted = OrientedBox(np.array([0.05, 0, 0]), [0.05, 0.05, 0.05], [1, 0, 0, 0])
print(f"IoU, half shift   {g3.box_iou_3d(box, shifted):.3f}  (exact 1/3)")
