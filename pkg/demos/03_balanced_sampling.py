"""
Class-balanced patch sampling
=============================

The structures take up half a percent of the phantom. Drawing the patch
centre class uniformly first makes every class equally frequent anyway.
"""
import numpy as np

from dualseg.phantom import PhantomSpec, generate
from dualseg.sampler import AugmentParams, BalancedSampler

image, labels = generate(PhantomSpec(dims=(64, 64, 64), seed=3))
print("foreground fraction:", (labels.data > 0).mean())

sampler = BalancedSampler(image.data, labels.data, 3)
classes, _, centers = sampler.draw_centers(30000, np.random.default_rng(0))
print("centre-class frequencies:", np.bincount(labels.data[tuple(centers.T)]) / 30000)

# a training batch, with random rotation / scaling applied to each pair
sampler = BalancedSampler(image.data, labels.data, 3, augment=AugmentParams())
batch = sampler.sample(11, np.random.default_rng(1), np.random.default_rng(2))
print("global", batch.global_patches.shape, "local", batch.local_patches.shape,
      "targets", batch.targets.shape)
print("centre labels:", batch.targets[:, 3, 3, 3])
