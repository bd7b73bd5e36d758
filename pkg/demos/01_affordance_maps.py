# coding: utf-8

# # Scene affordance maps
#
# A synthetic scene is a floor plus a few furniture pieces sampled as surface points.
# Each task pairs the scene with a prompt and a joint trajectory. The affordance map
# stores, for every scene point and each of six joints, how close that joint ever got
# to the point: exp(-0.5 d / sigma^2) of the smallest distance over all frames.

# In[1]:

from pathlib import Path

import numpy as np

from affordmotion import compute_affordance_map
from affordmotion.plotting import plot_affordance, plot_topdown
from affordmotion.scene_synth import TaskConfig, generate_dataset

out = Path("demo_output")
samples = generate_dataset(4, seed=0, task_config=TaskConfig(n_frames=60, frame_rate=20), n_points=4096)
for s in samples:
    print(f"{s.prompt.raw!r:36} target={s.target.label:8} frames={s.motion.num_frames}")


# The map shipped with each sample is recomputed here from scratch. Values lie in (0, 1];
# a value of one means the joint touched that point.

# In[2]:

s = samples[0]
amap = compute_affordance_map(s.scene, s.motion)
print(np.abs(amap.values - s.affordance.values).max())
print("pelvis channel range:", amap.values[:, 0].min(), amap.values[:, 0].max())


# The squared-distance variant falls off faster away from the trajectory.

# In[3]:

sq = compute_affordance_map(s.scene, s.motion, squared=True)
print("mean literal:", amap.values.mean(), "mean squared:", sq.values.mean())


# Top-down renderings of the trajectory and of the pelvis and right-foot channels.

# In[4]:

plot_topdown(s.scene, [s.motion], out / "trajectory.png", s.target.centroid, s.prompt.raw)
plot_affordance(s.scene, amap, out / "affordance_pelvis.png", slot=0, title="pelvis")
plot_affordance(s.scene, amap, out / "affordance_right_foot.png", slot=4, title="right foot")
print(sorted(p.name for p in out.iterdir()))
