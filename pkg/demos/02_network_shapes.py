"""
The dual-pathway network
========================

Both pathways shrink their input by (field - 1), so a 27^3 local patch and a
59^3 global patch both come out at 7^3 and can be concatenated channel-wise.
"""
import numpy as np

from dualseg.network import Network, NetworkSpec

spec = NetworkSpec()
net = Network.build(spec, np.random.default_rng(0))
print("parameters:", net.num_parameters())

for out in (7, 53):
    ext = spec.input_extents(out)
    print(f"output {out}^3 needs local {ext['local']}^3 and global {ext['global']}^3 inputs")

# a forward pass in training mode on a batch of two patch pairs
rng = np.random.default_rng(1)
lp = rng.standard_normal((2, 1, 27, 27, 27)).astype(np.float32)
gp = rng.standard_normal((2, 1, 59, 59, 59)).astype(np.float32)
logits = net.forward(lp, gp, "train", rng)
print("logits:", logits.shape)

# single-pathway variants get their own head
for which in ("local", "global"):
    n = Network.build(spec.with_(pathways=which), rng)
    print(which, "only:", n.num_parameters(), "parameters")
