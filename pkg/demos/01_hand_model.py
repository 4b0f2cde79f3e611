# %% [markdown]
# # The procedural hand
# A tube-shaped stand-in for a parametric hand: 16 rotation nodes, 21 joints,
# 10 shape coefficients, and a weak-perspective camera.

# %%
from pathlib import Path

import numpy as np

from geohand.export import skeleton_svg, write_obj
from geohand.hand_model import (BONES, axis_angle_to_matrix, bone_lengths, build_template,
                                forward_kinematics, project)
from geohand.tensor import Tensor

out = Path("runs/demos")
template = build_template(120, seed=7)
print(template.rest_vertices.shape, template.faces.shape, template.skin_weights.shape)

# %% rest pose, zero shape
rest = forward_kinematics(template, Tensor(np.tile(np.eye(3), (1, 16, 1, 1))), Tensor(np.zeros((1, 10))))
print("rest bone lengths (mm):", np.round(bone_lengths(rest.joints).data[0] * 1000, 1))

# %% curl every finger a little and tilt the wrist
aa = np.zeros((1, 16, 3))
aa[0, 0] = (0.0, 0.0, 0.4)
aa[0, 6:] = (0.0, 0.0, -0.5)
posed = forward_kinematics(template, Tensor(axis_angle_to_matrix(aa)), Tensor(np.zeros((1, 10))))

# bone lengths are unchanged by pose
drift = np.abs(bone_lengths(posed.joints).data - bone_lengths(rest.joints).data).max()
print("max bone-length drift under pose:", drift)

# %% shape coefficients do change them
betas = np.zeros((1, 10))
betas[0, 0] = 1.5
fat = forward_kinematics(template, Tensor(axis_angle_to_matrix(aa)), Tensor(betas))
print("beta_0 = 1.5 changes bones by up to",
      np.abs(bone_lengths(fat.joints).data - bone_lengths(posed.joints).data).max() * 1000, "mm")

# %% project and save
uv = project(posed.joints, Tensor(np.array([[8.0, 0.0, 0.3]]))).data[0]
write_obj(out / "posed_hand.obj", posed.vertices.data[0], template.faces)
(out / "posed_hand.svg").write_text(skeleton_svg(uv, 64, 48))
print(f"{len(BONES)} bones drawn to", out / "posed_hand.svg")
