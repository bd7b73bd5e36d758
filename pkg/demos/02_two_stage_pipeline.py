# coding: utf-8

# # Two-stage generation on toy data
#
# Stage one (ADM) denoises an affordance map for a scene and prompt. Stage two (AMDM)
# denoises a joint trajectory that cross-attends to features of that map. Both are
# trained here for a few minutes on CPU with small widths, so results are rough.

# In[1]:

import time
from pathlib import Path

import numpy as np
import torch

from affordmotion import metrics
from affordmotion.adm import ADMConfig, ADMTrainConfig, train_adm
from affordmotion.amdm import AMDMConfig, AMDMTrainConfig, generate_motions
from affordmotion.amdm import train_amdm
from affordmotion.bodyfit import fit_body
from affordmotion.plotting import plot_topdown
from affordmotion.scene_synth import TaskConfig, generate_dataset

torch.set_num_threads(1)
out = Path("demo_output")
data = generate_dataset(120, seed=1, task_config=TaskConfig(n_frames=32, frame_rate=10, actions=("walk",)),
                        n_points=256)
train, test = data[:110], data[110:]


# In[2]:

t0 = time.time()
adm = train_adm(train, ADMTrainConfig(T=200, steps=600, batch_size=16, lr=5e-4),
                ADMConfig(d_model=64, heads=4, process_layers=2, step_dim=64, k=8))
amdm = train_amdm(train, AMDMTrainConfig(T=200, steps=600, batch_size=16, lr=5e-4),
                  model_config=AMDMConfig(d_model=64, heads=4, layers=3, step_dim=64, feat_dim=64,
                                          unet_dims=(16, 32, 64, 64), k=8, max_frames=32))
print(f"trained in {time.time() - t0:.0f}s; final losses {adm.extra['losses'][-1]:.4f} {amdm.extra['losses'][-1]:.4f}")


# Sampling runs both stages. The ADM map is decoded into a per-joint anchor (argmax over
# points) to measure how well it lands on the target object.

# In[3]:

motions, maps = generate_motions(adm, amdm, [s.scene for s in test], [s.prompt for s in test], seed=0,
                                 return_affordance=True)
for m, a, s in zip(motions, maps, test):
    g = metrics.goal_distance(m, s.target)
    mn, pel, _ = metrics.affordance_grounding(a, s.scene, s.target)
    print(f"{s.prompt.raw!r:30} goal {g:.2f} m  anchor min {mn:.2f} pelvis {pel:.2f}")
plot_topdown(test[0].scene, [motions[0], test[0].motion], out / "generated_vs_reference.png",
             test[0].target.centroid, test[0].prompt.raw)


# Finally the articulated body is fitted to one generated joint sequence.

# In[4]:

fit = fit_body(motions[0])
print(f"fit rmse {fit.rmse * 100:.2f} cm after {fit.iterations} iterations, converged={fit.converged}")
print("scale", round(fit.params.scale, 3), "max rotation", np.linalg.norm(fit.params.joint_rots, axis=-1).max())
