"""
Training on a phantom
=====================

A thin network trained for a few hundred iterations with the default recipe
(Adam at 1e-3, batches of 11, dropout 0.3, balanced sampling, augmentation).
Validation picks the best parameters. Takes a few minutes on one core.
"""
from dualseg.config import InferenceSection, NetworkSection, RunConfig, TrainingSection
from dualseg.phantom import PhantomSpec, phantom_set
from dualseg.train import Dataset, evaluate, train

train_set, val, test = phantom_set(PhantomSpec(dims=(48, 48, 48), seed=100))
data = Dataset(train_set, val[0], test[0])

cfg = RunConfig(
    network=NetworkSection(fusion_width=24, local_widths=[8] * 4, global_widths=[8] * 5,
                           global_dilations=[1, 2, 4, 2, 1]),
    training=TrainingSection(max_iterations=300, validation_interval=100),
    inference=InferenceSection(mc_samples=10, tile_extent=68),
)
res = train(cfg, data, on_log=lambda line: print(line) if "val" in line else None)
print("loss: first 20 mean %.3f, last 20 mean %.3f" % (
    sum(res.loss_log[:20]) / 20, sum(res.loss_log[-20:]) / 20))

rep, _ = evaluate(res.net, *data.test, cfg)
print(rep.to_text())
