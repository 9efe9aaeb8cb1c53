"""
Uncertainty from Monte-Carlo dropout
====================================

Keeping dropout on at test time and averaging N passes gives a segmentation
(the mean) and an uncertainty map (the variance). The variance sits on
class boundaries. The network here is only briefly trained, so expect a
rough segmentation.
"""
import numpy as np

from dualseg.bayes import InferenceConfig, mc_segment, uncertainty_summary
from dualseg.config import InferenceSection, NetworkSection, RunConfig, TrainingSection
from dualseg.phantom import PhantomSpec, generate, phantom_set
from dualseg.train import Dataset, train

train_set, val, _ = phantom_set(PhantomSpec(dims=(48, 48, 48), seed=100), n_test=0)
cfg = RunConfig(
    network=NetworkSection(fusion_width=24, local_widths=[8] * 4, global_widths=[8] * 5,
                           global_dilations=[1, 2, 4, 2, 1]),
    training=TrainingSection(max_iterations=150, validation_interval=150),
    inference=InferenceSection(tile_extent=68),
)
net = train(cfg, Dataset(train_set, val[0])).net

image, labels = generate(PhantomSpec(dims=(48, 48, 48), seed=7))
out = mc_segment(net, image.data, InferenceConfig(mc_samples=20, dropout=0.3, tile_extent=68))
print("mean map sums to one:", np.abs(out.mean.sum(0) - 1).max())
s = uncertainty_summary(out, labels.data)
print("variance near boundaries: %.2e, elsewhere: %.2e" % (
    s["reference_boundary_band"]["mean"], s["reference_interior"]["mean"]))

# p = 0 makes every pass identical
still = mc_segment(net, image.data, InferenceConfig(mc_samples=3, dropout=0.0, tile_extent=68))
print("variance with p=0:", float(still.variance.max()))
