# coding: utf-8

# # Metrics and the five-repeat report
#
# Feature-space metrics need a motion encoder and a text encoder that place matched
# pairs close together. A small pair is trained contrastively on the synthetic data.

# In[1]:

import numpy as np
import torch

from affordmotion import metrics
from affordmotion.scene_synth import TaskConfig, generate_dataset

torch.set_num_threads(1)
data = generate_dataset(180, seed=2, task_config=TaskConfig(n_frames=24, frame_rate=10), n_points=128)
train, test = data[:150], data[150:]
ex = metrics.train_feature_extractors(train, metrics.ExtractorConfig(steps=300, hidden=64))
print("held-out triplet accuracy", metrics.triplet_accuracy(ex, [s.motion for s in test], [s.prompt for s in test]))


# Scoring the reference motions against themselves gives FID zero and an upper bound for
# R-precision. Jittered copies show how the numbers move.

# In[2]:

rng = np.random.default_rng(0)
reference = [s.motion.joints for s in test]
jittered = [[m + rng.normal(0, 0.05, m.shape) for m in reference] for _ in range(5)]
for name, gen in (("reference", reference), ("jittered", jittered)):
    report = metrics.evaluate_generated(test, gen, ex, repeats=5, affordances=[s.affordance for s in test])
    print(f"\n{name}\n{report.to_text()}")


# The same report as CSV, one column per repeat.

# In[3]:

print(report.to_csv())
