"""Pose a UR5, place a camera that sees it, and render the robot mask.

Prints the joint positions in the robot base frame and in the camera frame,
their pixel projections, and an ASCII view of the binary mask.

    python demos/01_kinematics_and_masks.py
"""

import numpy as np

from armsight.kinematics import JointConfig, RobotType, joint_positions, robot_model
from armsight.scene import CameraModel, project_points, render_mask, sample_camera_pose

model = robot_model(RobotType.UR5)
config = JointConfig((0.3, -1.2, 1.4, -0.6, 1.0, 0.0))

# joint centres in the base frame; a2 is negative so the upper arm points along -x
base_xyz = joint_positions(model, config)
print("joint positions in the base frame (m)")
for j, p in enumerate(base_xyz, 1):
    print(f"  joint {j}: {np.round(p, 3)}")

# a camera on a sphere around the base, looking at the arm
pose = sample_camera_pose(7, model.reach, distance_band=(model.reach + 0.3, 2.2 * model.reach + 0.5))
camera = CameraModel.default(64, 53, pose)
cam_xyz = pose.apply(base_xyz)
print("\nthe same joints in the camera frame (m), and their pixels")
for j, (p, uv) in enumerate(zip(cam_xyz, project_points(camera, base_xyz)), 1):
    print(f"  joint {j}: {np.round(p, 3)} -> u={uv[0]:.1f} v={uv[1]:.1f}")

mask = render_mask(camera, model, config)
print(f"\nmask {mask.shape[1]}x{mask.shape[0]}, {100 * mask.mean():.1f}% robot pixels")
for row in mask[::2]:
    print("".join("#" if v else "." for v in row))
